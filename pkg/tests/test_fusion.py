import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from didfuse import didmodel, fusion, nnet
from didfuse.fusion import AttentionHead, FusionError

from oracles import energy_naive, softmax_naive

# spreads beyond ~36 make 1 - alpha round to exactly 1 in float64; head
# energies are bounded by sum|v| so this range covers realistic heads
energies_st = hnp.arrays(np.float64, st.integers(2, 6), elements=st.floats(-15, 15))


def random_head(r, m, k, kind="output"):
    return AttentionHead(r.normal(size=(m, k)), r.normal(size=m), r.normal(size=m), kind)


def posteriors(r, n, N, L):
    return nnet.softmax(r.normal(size=(n, N, L)), axis=2)


# -- attention primitives --------------------------------------------------------


def test_energy_zero_weights():
    head = AttentionHead(np.zeros((10, 5)), np.zeros(10), np.ones(10))
    assert fusion.attention_energy(np.arange(5.0), head) == 0.0


def test_energy_closed_form():
    head = AttentionHead(np.eye(1, 5), np.zeros(1), np.ones(1))
    assert fusion.attention_energy(np.full(5, 0.5), head) == pytest.approx(math.tanh(0.5), abs=1e-15)
    assert math.tanh(0.5) == pytest.approx(0.462117, abs=1e-6)


def test_energy_matches_oracle(rng):
    for _ in range(50):
        head = random_head(rng, rng.integers(1, 12), rng.integers(1, 9))
        x = rng.normal(size=head.W.shape[1])
        assert abs(fusion.attention_energy(x, head) - energy_naive(x, head.W, head.b, head.v)) < 1e-12


def test_energy_width_mismatch():
    with pytest.raises(FusionError):
        fusion.attention_energy(np.zeros(4), AttentionHead(np.zeros((2, 5)), np.zeros(2), np.zeros(2)))


def test_head_shape_validation():
    with pytest.raises(FusionError):
        AttentionHead(np.zeros((2, 5)), np.zeros(3), np.zeros(2))
    with pytest.raises(FusionError):
        AttentionHead(np.zeros((2, 5)), np.zeros(2), np.zeros(2), "frames")


def test_weights_examples():
    np.testing.assert_allclose(fusion.attention_weights([0.0, 0.0]), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(fusion.attention_weights([1.3] * 3), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(fusion.attention_weights([2.0, 0.0]), softmax_naive([2.0, 0.0]), atol=1e-15)
    np.testing.assert_allclose(fusion.attention_weights([2.0, 0.0]), [0.880797, 0.119203], atol=1e-6)


@settings(max_examples=300, deadline=None)
@given(energies_st, st.floats(-100, 100))
def test_weights_contract(e, shift):
    a = fusion.attention_weights(e)
    assert abs(a.sum() - 1) < 1e-9
    assert np.all((a > 0) & (a < 1))
    np.testing.assert_allclose(fusion.attention_weights(e + shift), a, rtol=0, atol=1e-12)


def test_fuse_examples():
    o1, o2 = np.array([0.7, 0.2, 0.1]), np.array([0.1, 0.1, 0.8])
    np.testing.assert_array_equal(fusion.attentive_fuse([o1, o2], [1.0, 0.0]), np.r_[o1, np.zeros(3)])
    np.testing.assert_array_equal(fusion.attentive_fuse([o1, o1], [0.5, 0.5]), np.r_[o1 / 2, o1 / 2])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 4), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_fuse_blocks_exact_and_mass(N, L, seed):
    r = np.random.default_rng(seed)
    O = [nnet.softmax(r.normal(size=L)) for _ in range(N)]
    alpha = fusion.attention_weights(r.normal(size=N))
    z = fusion.attentive_fuse(O, alpha)
    for d in range(N):
        assert np.array_equal(z[d * L:(d + 1) * L], alpha[d] * O[d])
    assert abs(z.sum() - 1) < 1e-12


def test_fuse_length_mismatch():
    with pytest.raises(FusionError):
        fusion.attentive_fuse([np.ones(3), np.ones(4)], [0.5, 0.5])
    with pytest.raises(FusionError):
        fusion.attentive_fuse([np.ones(3)] * 2, [1.0])


# -- attentive model -------------------------------------------------------------


def make_attentive(r, variant="output", N=2, L=5, k=7, m=10):
    dims = [L] * N if variant == "output" else [k] * N
    model = fusion.AttentiveFusionModel([f"D{i}" for i in range(N)], L, dims, variant, m, seed=int(r.integers(1e6)))
    for name in model.params:
        model.params.values[name][...] = r.normal(scale=0.5, size=model.params[name].shape)
    return model


def test_attentive_forward_matches_composed_oracle(rng):
    for variant in ("output", "hidden"):
        model = make_attentive(rng, variant, N=3)
        O = posteriors(rng, 4, 3, 5)
        H = [np.abs(rng.normal(size=(4, 7))) for _ in range(3)]
        X = fusion.head_inputs(variant, O, H)
        P, alpha = model.forward_batch(O, X)
        for i in range(4):
            e = [energy_naive(X[j][i], *(model.params[f"head.D{j}.{p}"] for p in "Wbv")) for j in range(3)]
            a = softmax_naive(e)
            z = np.concatenate([a[j] * O[i, j] for j in range(3)])
            logits = [model.params["cls.b"][c] + sum(model.params["cls.w"][c, q] * z[q] for q in range(15))
                      for c in range(5)]
            np.testing.assert_allclose(alpha[i], a, rtol=0, atol=1e-12)
            np.testing.assert_allclose(P[i], softmax_naive(logits), rtol=0, atol=1e-12)
            assert abs(P[i].sum() - 1) < 1e-6


def test_identical_heads_give_uniform_alpha(rng):
    model = make_attentive(rng, "output", N=3)
    for p in "Wbv":
        for d in ("D1", "D2"):
            model.params.values[f"head.{d}.{p}"][...] = model.params[f"head.D0.{p}"]
    o = nnet.softmax(rng.normal(size=5))
    O = np.tile(o, (1, 3, 1))
    _, alpha = model.forward_batch(O, fusion.head_inputs("output", O, None))
    np.testing.assert_array_equal(alpha, [[1 / 3] * 3])


def test_forced_minus_inf_energy_zeroes_block(rng):
    model = make_attentive(rng, "output")
    O = posteriors(rng, 3, 2, 5)
    model.forward_logits(O, fusion.head_inputs("output", O, None), force_energy={"D1": -np.inf})
    _, _, _, alpha = model._cache
    Z = (alpha[:, :, None] * O).reshape(3, -1)
    assert np.all(Z[:, 5:] == 0) and np.all(alpha[:, 0] == 1)


def test_attentive_forward_single_utterance(rng):
    model = make_attentive(rng, "hidden")
    scores = [didmodel.UtteranceScore("u", nnet.softmax(rng.normal(size=5)), rng.normal(size=7)) for _ in range(2)]
    p = fusion.attentive_forward(model, scores)
    assert p.shape == (5,) and abs(p.sum() - 1) < 1e-6
    scores[1] = didmodel.UtteranceScore("u", scores[1].o, np.zeros(0))
    with pytest.raises(FusionError, match="hidden"):
        fusion.attentive_forward(model, scores)


def test_attentive_shape_checks(rng):
    model = make_attentive(rng, "output")
    with pytest.raises(FusionError):
        model.predict(posteriors(rng, 2, 3, 5), [np.zeros((2, 5))] * 3)
    with pytest.raises(nnet.GraphError):
        make_attentive(rng, "output")._backward(np.zeros((1, 5)))


@pytest.mark.parametrize("variant", ["output", "hidden"])
def test_attentive_grad_check(rng, variant):
    O = posteriors(rng, 6, 2, 5)
    H = [np.abs(rng.normal(size=(6, 7))) for _ in range(2)]
    X = fusion.head_inputs(variant, O, H)
    model = make_attentive(rng, variant)
    model.set_input_stats(X)
    assert nnet.grad_check(model, (O, X), rng.integers(0, 5, 6), n_coords=1000) < 1e-4


# -- fusion layer ------------------------------------------------------------------


def test_fusion_layer_zero_init_uniform(rng):
    model = fusion.FusionLayerModel(2, 5, zero_init=True)
    P = fusion.fusion_layer_forward(model, posteriors(rng, 4, 2, 5))
    np.testing.assert_array_equal(P, np.full((4, 5), 0.2))


def test_fusion_layer_shapes_and_sum(rng):
    model = fusion.FusionLayerModel(3, 4, seed=1)
    assert model.params["fc1.w"].shape == (600, 12)
    P = model.predict(posteriors(rng, 5, 3, 4))
    np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-6)
    with pytest.raises(FusionError):
        model.predict(posteriors(rng, 5, 2, 4))


def test_fusion_layer_grad_check(rng):
    model = fusion.FusionLayerModel(2, 5, hidden=40, seed=2)
    O = posteriors(rng, 6, 2, 5)
    assert nnet.grad_check(model, (O, []), rng.integers(0, 5, 6), n_coords=400) < 1e-4


# -- LR fusion -------------------------------------------------------------------------


def test_lr_identical_systems_symmetric(rng):
    o = posteriors(rng, 40, 1, 4)
    O = np.concatenate([o, o], axis=1)
    y = np.array([np.argmax(v) if rng.random() < 0.7 else rng.integers(4) for v in o[:, 0]])
    model = fusion.lr_fusion_train(O, y)
    assert model.w[0] == pytest.approx(model.w[1], abs=1e-12)


def test_lr_apply_examples(rng):
    O = posteriors(rng, 6, 2, 4)
    model = fusion.LrFusionModel(2, 4)
    model.params.set_values({"w": [1.0, 0.0], "c": np.zeros(4)})
    np.testing.assert_allclose(fusion.lr_fusion_apply(model, O), O[:, 0], rtol=1e-12)
    same = np.concatenate([O[:, :1], O[:, :1]], axis=1)
    model.params.set_values({"w": [0.5, 0.5]})
    np.testing.assert_array_equal(np.argmax(model.predict(same), 1), np.argmax(O[:, 0], 1))


def test_lr_apply_matches_oracle(rng):
    O = posteriors(rng, 5, 3, 4)
    model = fusion.LrFusionModel(3, 4)
    w, c = rng.normal(size=3), rng.normal(size=4)
    model.params.set_values({"w": w, "c": c})
    P = model.predict(O)
    for i in range(5):
        z = [sum(w[d] * math.log(O[i, d, k]) for d in range(3)) + c[k] for k in range(4)]
        np.testing.assert_allclose(P[i], softmax_naive(z), rtol=0, atol=1e-12)


def test_lr_perfect_plus_random_system(rng):
    n, L = 200, 4
    y = rng.integers(0, L, n)
    perfect = np.eye(L)[y]
    noise = nnet.softmax(rng.normal(size=(n, L)), axis=1)
    O = np.stack([perfect, noise], axis=1)
    model = fusion.lr_fusion_train(O, y)
    acc = np.mean(np.argmax(model.predict(O), 1) == y)
    assert acc >= 1.0 - 0.005


def test_lr_converges_to_tolerance(rng):
    O = posteriors(rng, 80, 2, 3)
    y = rng.integers(0, 3, 80)
    model = fusion.lr_fusion_train(O, y)
    assert model.grad_norm < 1e-7 and model.n_iter < 200


def test_lr_single_class_rejected(rng):
    with pytest.raises(FusionError, match="single class"):
        fusion.lr_fusion_train(posteriors(rng, 5, 2, 3), np.zeros(5, dtype=int))


def test_lr_grad_check(rng):
    model = fusion.LrFusionModel(2, 5)
    model.params.set_values({"w": [0.7, 0.2], "c": rng.normal(size=5)})
    O = posteriors(rng, 6, 2, 5)
    assert nnet.grad_check(model, (O, None), rng.integers(0, 5, 6)) < 1e-4


def test_align_scores_checks_ids(rng):
    mk = lambda ids: [didmodel.UtteranceScore(u, np.full(3, 1 / 3), np.zeros(0)) for u in ids]
    ids, O = fusion.align_scores({"A": mk(["a", "b"]), "B": mk(["a", "b"])})
    assert ids == ["a", "b"] and O.shape == (2, 2, 3)
    with pytest.raises(FusionError, match="align"):
        fusion.align_scores({"A": mk(["a", "b"]), "B": mk(["b", "a"])})


# -- frozen bases and persistence ----------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_bases():
    r = np.random.default_rng(3)
    arch = didmodel.DidArchConfig((( 3, 1, 6), (3, 2, 6), (1, 1, 8)), (8, 6), 3)
    nets = [didmodel.build(arch, seed, ["x", "y", "z"]) for seed in (1, 2)]
    xs = [r.normal(size=(int(r.integers(12, 20)), 40)) for _ in range(12)]
    return nets, xs, np.arange(12) % 3


@pytest.mark.parametrize("which", ["attentive-output", "attentive-hidden", "layer"])
def test_fusion_training_leaves_bases_untouched(tiny_bases, which):
    nets, xs, y = tiny_bases
    before = [n.params.to_bytes() for n in nets]
    cfg = fusion.FusionTrainConfig(nnet.LrSchedule(0.05), epochs=3)
    if which == "layer":
        model = fusion.train_fusion_layer(nets, xs, y, cfg, hidden=16)
    else:
        model = fusion.train_attentive(nets, ["A", "B"], xs, y, which.split("-")[1], cfg=cfg)
    assert [n.params.to_bytes() for n in nets] == before
    assert len(model.history) == 3


def test_fusion_needs_two_systems(tiny_bases):
    nets, xs, y = tiny_bases
    with pytest.raises(FusionError):
        fusion.train_attentive(nets[:1], ["A"], xs, y)


def test_save_load_roundtrip_and_hash_check(tmp_path, tiny_bases):
    nets, xs, y = tiny_bases
    paths = []
    for i, net in enumerate(nets):
        nnet.round_to_f32(net.params)
        paths.append(tmp_path / f"b{i}.didm")
        didmodel.save_model(net, paths[-1])
    O, H = fusion.base_outputs(nets, xs)
    cfg = fusion.FusionTrainConfig(nnet.LrSchedule(0.05), epochs=2)
    model = fusion.fit_attentive(O, H, y, ["A", "B"], "hidden", 4, cfg, seed=1)
    for name in model.params:
        model.params.values[name][...] = model.params[name].astype(np.float32)
    for k, v in model.buffers.items():
        model.buffers[k] = v.astype(np.float32).astype(np.float64)
    path = tmp_path / "fused.didm"
    fusion.save_fusion(path, model, "attentive", [("A", paths[0]), ("B", paths[1])], ["x", "y", "z"])
    back, meta, base_paths = fusion.load_fusion(path)
    assert meta["variant"] == "hidden" and meta["m"] == 4 and meta["domain_order"] == ["A", "B"]
    assert [p.name for p in base_paths] == ["b0.didm", "b1.didm"]
    X = fusion.head_inputs("hidden", O, H)
    np.testing.assert_array_equal(back.predict(O, X), model.predict(O, X))

    paths[1].write_bytes(paths[1].read_bytes() + b"\0")
    with pytest.raises(FusionError, match="hash"):
        fusion.load_fusion(path)
