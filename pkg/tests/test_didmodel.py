import json

import numpy as np
import pytest

from didfuse import datagen, didmodel, featext, nnet
from didfuse.didmodel import DidArchConfig, TrainConfig
from didfuse.nnet import LrSchedule

TOY = DidArchConfig.profile("toy", 5)


def toy_net(seed=0, n_classes=5, width=1):
    arch = DidArchConfig.profile("toy", n_classes, width)
    return didmodel.build(arch, seed, [f"d{i}" for i in range(n_classes)])


def load(manifest, split, domains=None):
    sub = manifest.select(split, domains)
    return didmodel.load_examples(sub, sorted(manifest.dialects()))


# -- architecture --------------------------------------------------------------


def test_paper_profile_layout():
    arch = DidArchConfig.profile("paper")
    assert [k for k, _, _ in arch.conv_specs] == [5, 7, 1, 1]
    assert [s for _, s, _ in arch.conv_specs] == [1, 2, 1, 1]
    assert [c for _, _, c in arch.conv_specs] == [500, 500, 500, 3000]
    assert arch.ff_sizes == (1500, 600) and arch.n_classes == 5


def test_paper_profile_network_shapes():
    net = didmodel.build(DidArchConfig.profile("paper"), seed=0)
    assert net.params["conv0.w"].shape == (500, 40, 5)
    assert net.params["conv3.w"].shape == (3000, 500, 1)
    assert net.params["ff0.w"].shape == (1500, 3000)
    s = net.forward(np.random.default_rng(0).normal(size=(20, 40)))
    assert s.o.shape == (5,) and s.h.shape == (600,)
    assert abs(s.o.sum() - 1) < 1e-6


def test_doubled_width_hidden_dim():
    assert DidArchConfig.profile("paper", width_multiplier=2).hidden_dim == 1200
    assert DidArchConfig.profile("paper", width_multiplier=2).scaled(3000) == 6000
    net = toy_net(width=2)
    assert net.forward(np.zeros((20, 40))).h.shape == (64,)


def test_minimum_length():
    assert TOY.min_frames() == 11
    net = toy_net()
    net.forward(np.zeros((11, 40)))
    with pytest.raises(didmodel.MinimumLengthError, match="needs >= 11"):
        net.forward(featext.FeatureMatrix(np.zeros((10, 40)), "short-utt"))


def test_build_deterministic():
    assert toy_net(5).params.to_bytes() == toy_net(5).params.to_bytes()
    assert toy_net(5).params.to_bytes() != toy_net(6).params.to_bytes()


def test_posteriors_sum_to_one(rng):
    net = toy_net()
    for _ in range(10):
        s = net.forward(rng.normal(size=(int(rng.integers(11, 60)), 40)))
        assert abs(s.o.sum() - 1) < 1e-6 and np.all(np.isfinite(s.h))


def test_zero_features_give_uniform_posterior():
    np.testing.assert_allclose(toy_net().forward(np.zeros((30, 40))).o, 0.2, atol=1e-12)


def test_bad_labels():
    with pytest.raises(ValueError):
        didmodel.build(TOY, 0, ["a", "a", "b", "c", "d"])
    with pytest.raises(ValueError):
        didmodel.build(TOY, 0, ["a", "b"])


def test_toy_network_grad_check(rng):
    net = toy_net(1)
    xs = [rng.normal(size=(int(rng.integers(12, 30)), 40)) for _ in range(3)]
    assert nnet.grad_check(net, xs, [0, 3, 4], n_coords=300) < 1e-4


def test_pool_std_variant_grad_check(rng):
    net = didmodel.build(DidArchConfig.profile("toy", 3, pool_std=True), 2, list("abc"))
    xs = [rng.normal(size=(16, 40)) for _ in range(2)]
    assert nnet.grad_check(net, xs, [0, 2], n_coords=300) < 1e-4


# -- training --------------------------------------------------------------------


def test_separable_two_class_training(make_corpus):
    man = make_corpus(per_class=40, n_domains=2)
    _, xs, ys = load(man, "train", ["A"])
    net = toy_net(0, n_classes=2)
    hist = didmodel.train(net, xs, ys, TrainConfig(LrSchedule(0.01), epochs=2, seed=0))
    assert hist[-1]["heldout_acc"] >= 0.95
    assert hist[-1]["heldout_loss"] < hist[0]["heldout_loss"]
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    assert all({"train_loss", "train_acc", "heldout_loss", "heldout_acc"} <= set(h) for h in hist)


def test_converged_toy_run_fits_training_set(make_corpus):
    man = make_corpus(labels=("p", "q", "r"), per_class=30)
    ids, xs, ys = load(man, "train", ["A"])
    net = toy_net(3, n_classes=3)
    didmodel.train(net, xs, ys, TrainConfig(LrSchedule(0.01), epochs=4, seed=1))
    P = np.stack([s.o for s in didmodel.score(net, ids, xs)])
    assert np.mean(np.argmax(P, 1) == ys) > 0.9


def test_zero_learning_rate_changes_nothing(make_corpus):
    man = make_corpus(per_class=10)
    _, xs, ys = load(man, "train", ["A"])
    net = toy_net(0, n_classes=2)
    before = net.params.to_bytes()
    hist = didmodel.train(net, xs, ys, TrainConfig(LrSchedule(0.0), epochs=2))
    assert net.params.to_bytes() == before
    assert len({h["heldout_loss"] for h in hist}) == 1


def test_training_is_deterministic(make_corpus):
    man = make_corpus(per_class=10)
    _, xs, ys = load(man, "train", ["A"])
    runs = []
    for _ in range(2):
        net = toy_net(4, n_classes=2)
        runs.append((didmodel.train(net, xs, ys, TrainConfig(LrSchedule(0.01), epochs=2, seed=9)),
                     net.params.to_bytes()))
    assert runs[0] == runs[1]


def test_batched_training_runs(make_corpus):
    man = make_corpus(per_class=10)
    _, xs, ys = load(man, "train", ["A"])
    hist = didmodel.train(toy_net(0, 2), xs, ys, TrainConfig(LrSchedule(0.01), epochs=1, batch_size=4))
    assert hist[-1]["step"] == int(np.ceil((len(xs) - 1) / 4))


def test_training_errors(make_corpus):
    with pytest.raises(didmodel.TrainingError, match="empty"):
        didmodel.train(toy_net(), [], np.zeros(0, dtype=int), TrainConfig())
    man = make_corpus(per_class=2)
    with pytest.raises(didmodel.TrainingError, match="unknown label"):
        didmodel.load_examples(man, ["p"])


# -- scoring and persistence ---------------------------------------------------------


def test_score_manifest_rows_and_determinism(make_corpus, tmp_path):
    man = make_corpus(per_class=3)
    test = man.select("test")
    net = toy_net(0, 2)
    scores = didmodel.score_manifest(net, test)
    assert [s.utt_id for s in scores] == [r.utt_id for r in test.rows]
    labels = sorted(man.dialects())
    didmodel.write_scores(tmp_path / "a.tsv", labels, scores, with_hidden=True)
    didmodel.write_scores(tmp_path / "b.tsv", labels, didmodel.score_manifest(net, test), with_hidden=True)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["utt_id", "p", "q"] and lines[0].endswith("h_32")
    assert len(lines) == len(test) + 1
    back_labels, back = didmodel.read_scores(tmp_path / "a.tsv")
    assert back_labels == labels
    np.testing.assert_allclose(back[0].o, scores[0].o, rtol=1e-8)
    assert back[0].h.shape == (32,)


def test_score_empty_manifest(tmp_path):
    scores = didmodel.score_manifest(toy_net(), datagen.Manifest([], tmp_path))
    didmodel.write_scores(tmp_path / "e.tsv", ["a", "b"], scores)
    assert (tmp_path / "e.tsv").read_text() == "utt_id\ta\tb\n"


def test_score_missing_features(make_corpus):
    man = make_corpus(per_class=2).select("test")
    gone = man.resolve(man.rows[1])
    gone.unlink()
    with pytest.raises(FileNotFoundError, match=man.rows[1].utt_id):
        didmodel.score_manifest(toy_net(0, 2), man)


def test_model_roundtrip(tmp_path, rng):
    net = toy_net(2)
    nnet.round_to_f32(net.params)
    net.train_meta["domains"] = ["A"]
    didmodel.save_model(net, tmp_path / "m.didm")
    back = didmodel.load_model(tmp_path / "m.didm")
    assert back.params.to_bytes() == net.params.to_bytes()
    assert back.label_names == net.label_names and back.train_meta["domains"] == ["A"]
    x = rng.normal(size=(25, 40))
    np.testing.assert_array_equal(back.forward(x).o, net.forward(x).o)


def test_load_model_rejects_other_kinds(tmp_path):
    nnet.save_container(tmp_path / "x.didm", {"w": np.zeros(1)}, {"kind": "fusion"})
    with pytest.raises(ValueError, match="not a DID model"):
        didmodel.load_model(tmp_path / "x.didm")


@pytest.mark.slow
def test_doubled_width_network_close_to_specialists(seen_runs):
    rows = {r["id"]: r["metrics"] for r in json.loads((seen_runs[0] / "report.json").read_text())["rows"]}
    for d in ("A", "B"):
        assert rows["A+B"][d]["acc"] >= rows[d][d]["acc"] - 10.0
