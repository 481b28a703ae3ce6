import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from didfuse import featext
from didfuse.featext import AudioClip, FeatureError, FeatureMatrix


def tone(freq, n=16000, amp=0.5):
    return AudioClip(amp * np.sin(2 * np.pi * freq * np.arange(n) / 16000), utt_id="tone")


# independent oracle: explicit DFT sum and loop-built HTK-mel triangles

def oracle_filterbank_energies(frame):
    n = len(frame)
    win = [0.54 - 0.46 * math.cos(2 * math.pi * i / (n - 1)) for i in range(n)]
    x = [frame[i] * win[i] for i in range(n)]
    mags = []
    for k in range(257):
        re = sum(x[i] * math.cos(2 * math.pi * k * i / 512) for i in range(n))
        im = sum(x[i] * math.sin(2 * math.pi * k * i / 512) for i in range(n))
        mags.append(math.hypot(re, im))
    mel = lambda f: 2595 * math.log10(1 + f / 700)
    imel = lambda m: 700 * (10 ** (m / 2595) - 1)
    top = mel(8000)
    edges = [imel(top * i / 41) for i in range(42)]
    energies = []
    for j in range(40):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        total = 0.0
        for k in range(257):
            f = k * 16000 / 512
            if lo < f <= mid:
                total += mags[k] * (f - lo) / (mid - lo)
            elif mid < f < hi:
                total += mags[k] * (hi - f) / (hi - mid)
        energies.append(total)
    return np.array(energies), edges[1:-1]


# -- framing -----------------------------------------------------------------


@pytest.mark.parametrize("n,t", [(16000, 98), (400, 1), (559, 1), (560, 2)])
def test_frame_counts(n, t):
    frames = featext.frame_signal(AudioClip(np.zeros(n)))
    assert frames.shape == (t, 400)


def test_too_short_clip_names_utterance():
    with pytest.raises(FeatureError, match="utt-42"):
        featext.frame_signal(AudioClip(np.zeros(399), utt_id="utt-42"))


@settings(max_examples=50, deadline=None)
@given(st.integers(400, 40000))
def test_frame_count_formula(n):
    x = np.arange(n, dtype=np.float64)
    frames = featext.frame_signal(AudioClip(x))
    assert frames.shape[0] == (n - 400) // 160 + 1
    # frame i starts at sample 160 i, no padding
    np.testing.assert_array_equal(frames[:, 0], 160 * np.arange(frames.shape[0]))
    assert frames[-1, -1] <= n - 1


def test_sample_rate_enforced():
    with pytest.raises(FeatureError, match="8000"):
        AudioClip(np.zeros(800), sample_rate=8000)


# -- mel filterbank ------------------------------------------------------------


def test_filterbank_properties():
    fb = featext.mel_filterbank()
    assert fb.shape == (40, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    assert np.all(np.diff(np.argmax(fb, axis=1)) >= 0)
    assert np.all(np.diff(featext.mel_centers()) > 0)


def test_mel_roundtrip():
    f = np.linspace(0, 8000, 33)
    np.testing.assert_allclose(featext.mel_to_hz(featext.hz_to_mel(f)), f, atol=1e-9)
    assert featext.hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.1)


def test_1khz_tone_peak_matches_dft_oracle():
    frame = featext.frame_signal(tone(1000.0, n=400))[0]
    ours = featext.filterbank_energies(frame[None])[0]
    ref, centers = oracle_filterbank_energies(frame)
    np.testing.assert_allclose(ours, ref, rtol=1e-9, atol=1e-9)
    nearest = int(np.argmin(np.abs(np.array(centers) - 1000.0)))
    assert int(np.argmax(ours)) == int(np.argmax(ref)) == nearest


# -- MFCC and CMVN -----------------------------------------------------------


def test_silence_hits_log_floor():
    frames = featext.frame_signal(AudioClip(np.zeros(2000)))
    assert np.all(featext.filterbank_energies(frames) == 0)
    m = featext.mfcc(frames).frames
    assert m.shape == (frames.shape[0], 40)
    assert np.all(m == m[0])
    np.testing.assert_allclose(m[0, 0], math.log(1e-10) * math.sqrt(40), rtol=1e-12)
    np.testing.assert_allclose(m[0, 1:], 0, atol=1e-9)


def test_mfcc_deterministic_and_row_wise(rng):
    frames = featext.frame_signal(AudioClip(rng.uniform(-0.5, 0.5, 3000)))
    frames[1] = frames[0]
    a, b = featext.mfcc(frames).frames, featext.mfcc(frames.copy()).frames
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(a[0], a[1])
    assert np.all(np.isfinite(a))


def test_cmvn_constant_column_zeroed():
    x = np.ones((5, 40))
    x[:, 1] = np.arange(5)
    out = featext.cmvn(FeatureMatrix(x)).frames
    np.testing.assert_array_equal(out[:, 0], 0.0)


def test_cmvn_unit_column_unchanged():
    x = np.zeros((2, 40))
    x[:, 3] = [-1.0, 1.0]
    np.testing.assert_array_equal(featext.cmvn(FeatureMatrix(x)).frames[:, 3], [-1.0, 1.0])


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(3, 40), st.just(40)), elements=st.floats(-1e3, 1e3)))
def test_cmvn_statistics_and_idempotence(x):
    out = featext.cmvn(FeatureMatrix(x)).frames
    varying = x.std(axis=0) > 1e-3
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out[:, varying].var(axis=0) - 1) < 1e-4)
    again = featext.cmvn(FeatureMatrix(out)).frames
    np.testing.assert_allclose(again[:, varying], out[:, varying], atol=1e-5)


def test_cmvn_3x40_mean(rng):
    out = featext.cmvn(FeatureMatrix(rng.normal(size=(3, 40)))).frames
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)


def test_extract_end_to_end(rng):
    f = featext.extract(AudioClip(rng.uniform(-0.3, 0.3, 16000), utt_id="u"))
    assert f.frames.shape == (98, 40) and f.utt_id == "u"
    assert np.all(np.abs(f.frames.mean(axis=0)) < 1e-6)


# -- WAV and DIDF I/O ------------------------------------------------------------


def test_wav_roundtrip(tmp_path):
    clip = tone(440.0, n=1600)
    featext.write_wav(tmp_path / "a.wav", clip)
    back = featext.read_wav(tmp_path / "a.wav")
    assert back.utt_id == "a"
    np.testing.assert_allclose(back.samples, clip.samples, atol=1 / 32768)


@pytest.mark.parametrize("channels,width,rate,msg", [(2, 2, 16000, "mono"), (1, 1, 16000, "16-bit"),
                                                     (1, 2, 8000, "8000")])
def test_wav_rejects_other_encodings(tmp_path, channels, width, rate, msg):
    path = tmp_path / "bad.wav"
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(b"\0" * 800 * channels * width)
    with pytest.raises(FeatureError, match=msg):
        featext.read_wav(path)


def test_wav_rejects_garbage(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"not a wav at all")
    with pytest.raises(FeatureError):
        featext.read_wav(tmp_path / "x.wav")


def test_didf_roundtrip_and_layout(tmp_path, rng):
    x = rng.normal(size=(7, 40))
    featext.write_features(tmp_path / "f.didf", FeatureMatrix(x, "f"))
    buf = (tmp_path / "f.didf").read_bytes()
    assert buf[:4] == b"DIDF"
    assert np.frombuffer(buf[4:16], dtype="<u4").tolist() == [1, 7, 40]
    assert len(buf) == 16 + 4 * 7 * 40
    back = featext.read_features(tmp_path / "f.didf")
    np.testing.assert_array_equal(back.frames, x.astype(np.float32))


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "not a DIDF"),
    (lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:], "version"),
    (lambda b: b[:8] + (0).to_bytes(4, "little") + b[12:16], "empty"),
    (lambda b: b[:-4], "bytes"),
    (lambda b: b[:16] + np.array([np.nan], dtype="<f4").tobytes() + b[20:], "non-finite"),
])
def test_didf_rejects_bad_files(tmp_path, mutate, msg):
    featext.write_features(tmp_path / "f.didf", FeatureMatrix(np.ones((3, 40))))
    path = tmp_path / "g.didf"
    path.write_bytes(mutate((tmp_path / "f.didf").read_bytes()))
    with pytest.raises(FeatureError, match=msg):
        featext.read_features(path)


def test_didf_refuses_to_write_empty(tmp_path):
    with pytest.raises(FeatureError):
        featext.write_features(tmp_path / "e.didf", FeatureMatrix(np.zeros((0, 40))))
