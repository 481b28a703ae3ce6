"""MFCC front end: 400-sample Hamming frames every 160 samples, 512-point
magnitude spectrum, 40 mel filters over 0-8 kHz, log, DCT-II (all 40
coefficients), then per-utterance mean/variance normalisation.

Also reads 16 kHz mono PCM WAV and reads/writes DIDF feature files.
"""

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

SAMPLE_RATE = 16000
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 40
N_CEPS = 40
LOG_FLOOR = 1e-10
CMVN_FLOOR = 1e-8


class FeatureError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    utt_id: str = ""

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise FeatureError(
                f"{self.utt_id or 'clip'}: sample rate {self.sample_rate} Hz, need {SAMPLE_RATE}"
            )
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class FeatureMatrix:
    frames: np.ndarray
    utt_id: str = ""

    @property
    def n_frames(self):
        return self.frames.shape[0]


def read_wav(path, utt_id=None):
    """Load 16-bit mono 16 kHz PCM as floats in [-1, 1)."""
    path = Path(path)
    utt_id = utt_id or path.stem
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if w.getcomptype() != "NONE":
                raise FeatureError(f"{path}: compressed WAV ({w.getcomptype()}) not supported")
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise FeatureError(f"{path}: not a PCM WAV file ({exc})") from None
    if channels != 1:
        raise FeatureError(f"{path}: {channels} channels, need mono")
    if width != 2:
        raise FeatureError(f"{path}: {8 * width}-bit samples, need 16-bit")
    if rate != SAMPLE_RATE:
        raise FeatureError(f"{path}: sample rate {rate} Hz, need {SAMPLE_RATE}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate, utt_id)


def write_wav(path, clip):
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())


def n_frames_for(n_samples):
    if n_samples < WIN_LENGTH:
        return 0
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def frame_signal(clip):
    """Split into (T, 400) frames starting every 160 samples, no padding."""
    n = clip.samples.shape[0]
    t = n_frames_for(n)
    if t == 0:
        raise FeatureError(
            f"{clip.utt_id or 'clip'}: {n} samples yields no features (need >= {WIN_LENGTH})"
        )
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(t)[:, None]
    return clip.samples[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels=N_MELS, fmin=0.0, fmax=SAMPLE_RATE / 2):
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular filters evaluated at the FFT bin frequencies, shape (n_mels, n_fft//2+1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


_WINDOW = np.hamming(WIN_LENGTH)
_FBANK = mel_filterbank()


def filterbank_energies(frames):
    spec = np.abs(np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=1))
    return spec @ _FBANK.T


def mfcc(frames, utt_id=""):
    energies = filterbank_energies(np.asarray(frames, dtype=np.float64))
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :N_CEPS]
    return FeatureMatrix(ceps, utt_id)


def cmvn(features):
    x = features.frames
    if x.shape[0] < 1:
        raise FeatureError(f"{features.utt_id}: cannot normalise zero frames")
    mu = x.mean(axis=0)
    mu = mu + (x - mu).mean(axis=0)  # second pass removes rounding drift
    # constant columns centre to exact zeros; the floor would amplify drift
    mu = np.where(np.ptp(x, axis=0) == 0, x[0], mu)
    xc = x - mu
    sd = np.maximum(np.sqrt((xc * xc).mean(axis=0)), CMVN_FLOOR)
    return FeatureMatrix(xc / sd, features.utt_id)


def extract(clip):
    """AudioClip -> normalised 40-dim MFCC FeatureMatrix."""
    return cmvn(mfcc(frame_signal(clip), clip.utt_id))


# DIDF: magic, u32 version, u32 n_frames, u32 n_coeffs, f32 row-major data

FEATURE_MAGIC = b"DIDF"
FEATURE_VERSION = 1


def write_features(path, features):
    x = np.asarray(features.frames)
    if x.ndim != 2 or x.shape[0] == 0:
        raise FeatureError(f"{path}: refusing to write {x.shape} feature matrix")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, x.shape[0], x.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path, utt_id=None):
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 16 or buf[:4] != FEATURE_MAGIC:
        raise FeatureError(f"{path}: not a DIDF feature file")
    version, t, c = struct.unpack_from("<III", buf, 4)
    if version != FEATURE_VERSION:
        raise FeatureError(f"{path}: unsupported DIDF version {version}")
    if t == 0 or c == 0:
        raise FeatureError(f"{path}: empty feature matrix ({t} x {c})")
    if len(buf) != 16 + 4 * t * c:
        raise FeatureError(f"{path}: expected {16 + 4 * t * c} bytes, found {len(buf)}")
    frames = np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float64).reshape(t, c)
    if not np.all(np.isfinite(frames)):
        raise FeatureError(f"{path}: non-finite feature values")
    return FeatureMatrix(frames, utt_id or path.stem)
