"""Score-level combination of domain-specific DID systems.

Three trainable combiners sit on top of frozen base networks:

* ``AttentiveFusionModel``: a per-domain scoring head turns each system's
  posterior (``variant='output'``) or last hidden activation
  (``variant='hidden'``) into an energy ``v_d . tanh(W_d x_d + b_d)``; the
  energies are softmax-normalised across domains, each posterior is scaled
  by its weight, and the concatenation feeds a dense softmax classifier.
* ``FusionLayerModel``: dense(600) + ReLU + dense softmax over the
  concatenated posteriors.
* ``LrFusionModel``: multinomial logistic regression on per-system
  log-posteriors with one scalar weight per system and per-class offsets.
"""

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnet
from .nnet import Dense, LrSchedule, ParamSet, ReLU

DEFAULT_M = 10
FUSION_HIDDEN = 600
LOG_FLOOR = 1e-10


class FusionError(ValueError):
    pass


class FreezeViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Attention primitives


@dataclass
class AttentionHead:
    W: np.ndarray  # (m, K)
    b: np.ndarray  # (m,)
    v: np.ndarray  # (m,)
    input_kind: str = "output"

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],) or self.v.shape != (self.W.shape[0],):
            raise FusionError(f"inconsistent head shapes W{self.W.shape} b{self.b.shape} v{self.v.shape}")
        if self.input_kind not in ("output", "hidden"):
            raise FusionError(f"input_kind must be 'output' or 'hidden', got {self.input_kind!r}")

    @property
    def m(self):
        return self.W.shape[0]


def attention_energy(x, head):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (head.W.shape[1],):
        raise FusionError(f"head expects input width {head.W.shape[1]}, got {x.shape}")
    return float(head.v @ np.tanh(head.W @ x + head.b))


def attention_weights(energies):
    return nnet.softmax(np.asarray(energies, dtype=np.float64))


def attentive_fuse(scores, alpha):
    """Concatenate ``alpha[d] * scores[d]`` in domain order."""
    scores = [np.asarray(s, dtype=np.float64) for s in scores]
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(scores) != alpha.shape[0]:
        raise FusionError(f"{len(scores)} score vectors but {alpha.shape[0]} weights")
    if len({s.shape for s in scores}) != 1:
        raise FusionError("score vectors differ in length")
    return np.concatenate([a * s for a, s in zip(alpha, scores)])


# ---------------------------------------------------------------------------
# Shared SGD loop for the neural combiners


@dataclass
class FusionTrainConfig:
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(0.001))
    epochs: int = 30
    batch_size: int = 1
    seed: int = 0


def _take(inputs, idx):
    O, X = inputs
    return O[idx], [x[idx] for x in X]


def fit(model, inputs, labels, cfg):
    """Mini-batch SGD on ``model.loss_and_grad``; returns per-epoch mean loss."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n == 0:
        raise FusionError("empty fusion training set")
    rng = np.random.default_rng(cfg.seed)
    history, step = [], 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            model.params.zero_grad()
            total += model.loss_and_grad(_take(inputs, idx), labels[idx]) * len(idx)
            nnet.sgd_step(model.params, cfg.schedule, step)
            step += 1
        history.append(total / n)
    return history


# ---------------------------------------------------------------------------
# Domain-attentive fusion


class AttentiveFusionModel:
    """Inputs are ``(O, X)``: O is (n, N, L) posteriors, X a list of N arrays
    (n, K_d) fed to the scoring heads (the posteriors themselves for the
    output variant, hidden activations for the hidden variant).
    """

    def __init__(self, domain_order, n_classes, input_dims, variant="output", m=DEFAULT_M, seed=0):
        domain_order = list(domain_order)
        if len(domain_order) < 2:
            raise FusionError("attentive fusion needs at least 2 domain systems")
        if variant not in ("output", "hidden"):
            raise FusionError(f"variant must be 'output' or 'hidden', got {variant!r}")
        if m < 1:
            raise FusionError("attention width m must be >= 1")
        if len(input_dims) != len(domain_order):
            raise FusionError("one input width per domain required")
        self.domain_order = domain_order
        self.n_classes = n_classes
        self.input_dims = [int(k) for k in input_dims]
        self.variant, self.m = variant, m
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        for d, k in zip(domain_order, self.input_dims):
            self.params.add(f"head.{d}.W", nnet.glorot_uniform(rng, (m, k), k, m))
            self.params.add(f"head.{d}.b", np.zeros(m))
            self.params.add(f"head.{d}.v", nnet.glorot_uniform(rng, (m,), m, 1))
        self.classifier = Dense(self.params, "cls", len(domain_order) * n_classes, n_classes, rng)
        # fixed (non-trained) standardisation of head inputs
        self.buffers = {}
        for d, k in zip(domain_order, self.input_dims):
            self.buffers[f"norm.{d}.mean"] = np.zeros(k)
            self.buffers[f"norm.{d}.scale"] = np.ones(k)
        self._cache = None

    def set_input_stats(self, X, floor=1e-3):
        """Standardise head inputs with per-dimension statistics of ``X``."""
        for d, x in zip(self.domain_order, X):
            self.buffers[f"norm.{d}.mean"] = x.mean(axis=0)
            self.buffers[f"norm.{d}.scale"] = np.maximum(x.std(axis=0), floor)

    def normalise(self, X):
        return [(x - self.buffers[f"norm.{d}.mean"]) / self.buffers[f"norm.{d}.scale"]
                for d, x in zip(self.domain_order, X)]

    @property
    def n_domains(self):
        return len(self.domain_order)

    def head(self, d):
        p = self.params
        return AttentionHead(p[f"head.{d}.W"], p[f"head.{d}.b"], p[f"head.{d}.v"],
                             self.variant)

    def _check(self, O, X):
        n, N, L = O.shape
        if N != self.n_domains or L != self.n_classes:
            raise FusionError(f"posteriors shaped {O.shape}, model wants (n, {self.n_domains}, {self.n_classes})")
        if len(X) != N:
            raise FusionError(f"{len(X)} head inputs for {N} domains")
        for d, x, k in zip(self.domain_order, X, self.input_dims):
            if x.ndim != 2 or x.shape != (n, k):
                raise FusionError(f"head {d}: input shaped {x.shape}, expected ({n}, {k})")

    def energies(self, X):
        E, T = [], []
        for d, x in zip(self.domain_order, X):
            p = self.params
            t = np.tanh(x @ p[f"head.{d}.W"].T + p[f"head.{d}.b"])
            T.append(t)
            E.append(t @ p[f"head.{d}.v"])
        return np.stack(E, axis=1), T

    def forward_logits(self, O, X, force_energy=None):
        """Returns (logits (n, L), attention weights (n, N))."""
        O = np.asarray(O, dtype=np.float64)
        X = [np.asarray(x, dtype=np.float64) for x in X]
        self._check(O, X)
        X = self.normalise(X)
        E, T = self.energies(X)
        if force_energy:
            # test hook: pin selected domains' energies (e.g. to -inf)
            for d, val in force_energy.items():
                E[:, self.domain_order.index(d)] = val
        alpha = nnet.softmax(E, axis=1)
        Z = (alpha[:, :, None] * O).reshape(O.shape[0], -1)
        self._cache = (O, X, T, alpha)
        return self.classifier.forward(Z), alpha

    def forward_batch(self, O, X, force_energy=None):
        """Returns (posteriors (n, L), attention weights (n, N))."""
        logits, alpha = self.forward_logits(O, X, force_energy)
        return nnet.softmax(logits, axis=1), alpha

    def _backward(self, dlogits):
        if self._cache is None:
            raise nnet.GraphError("attentive fusion: backward before forward")
        O, X, T, alpha = self._cache
        dZ = self.classifier.backward(dlogits).reshape(O.shape)
        dalpha = np.sum(dZ * O, axis=2)
        dE = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
        for j, d in enumerate(self.domain_order):
            g = self.params.grads
            v = self.params[f"head.{d}.v"]
            g[f"head.{d}.v"] += T[j].T @ dE[:, j]
            dA = (dE[:, j, None] * v) * (1.0 - T[j] ** 2)
            g[f"head.{d}.W"] += dA.T @ X[j]
            g[f"head.{d}.b"] += dA.sum(axis=0)

    def _logits(self, inputs):
        return self.forward_logits(*inputs)[0]

    def loss(self, inputs, labels):
        return nnet.batch_softmax_xent(self._logits(inputs), labels)[0]

    def loss_and_grad(self, inputs, labels):
        loss, _, d = nnet.batch_softmax_xent(self._logits(inputs), labels)
        self._backward(d)
        return loss

    def predict(self, O, X):
        return self.forward_batch(O, X)[0]


def head_inputs(variant, O, H):
    """Select the per-domain scoring inputs for a variant."""
    if variant == "output":
        return [O[:, j, :] for j in range(O.shape[1])]
    if H is None or any(h is None or h.size == 0 for h in H):
        raise FusionError("hidden-variant fusion needs hidden activations from every system")
    return list(H)


def attentive_forward(model, scores):
    """Fuse one utterance given per-domain UtteranceScores (domain order)."""
    if len(scores) != model.n_domains:
        raise FusionError(f"{len(scores)} systems given, model fuses {model.n_domains}")
    O = np.stack([s.o for s in scores])[None]
    H = None
    if model.variant == "hidden":
        if any(s.h is None or len(s.h) == 0 for s in scores):
            raise FusionError("hidden-variant fusion needs hidden activations")
        H = [np.asarray(s.h, dtype=np.float64)[None] for s in scores]
    return model.predict(O, head_inputs(model.variant, O, H))[0]


# ---------------------------------------------------------------------------
# Fully connected fusion layer


class FusionLayerModel:
    def __init__(self, n_systems, n_classes, hidden=FUSION_HIDDEN, seed=0, zero_init=False):
        self.n_systems, self.n_classes, self.hidden = n_systems, n_classes, hidden
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        self.dense1 = Dense(self.params, "fc1", n_systems * n_classes, hidden, rng, zero_init)
        self.act = ReLU()
        self.dense2 = Dense(self.params, "fc2", hidden, n_classes, rng, zero_init)

    def _logits(self, inputs):
        O = np.asarray(inputs[0], dtype=np.float64)
        if O.shape[1:] != (self.n_systems, self.n_classes):
            raise FusionError(f"posteriors shaped {O.shape}, expected (n, {self.n_systems}, {self.n_classes})")
        Z = O.reshape(O.shape[0], -1)
        return self.dense2.forward(self.act.forward(self.dense1.forward(Z)))

    def predict(self, O, X=None):
        return nnet.softmax(self._logits((O, X)), axis=1)

    def loss(self, inputs, labels):
        return nnet.batch_softmax_xent(self._logits(inputs), labels)[0]

    def loss_and_grad(self, inputs, labels):
        loss, _, d = nnet.batch_softmax_xent(self._logits(inputs), labels)
        self.dense1.backward(self.act.backward(self.dense2.backward(d)))
        return loss


def fusion_layer_forward(model, O):
    return model.predict(np.asarray(O, dtype=np.float64))


# ---------------------------------------------------------------------------
# Logistic-regression fusion


class LrFusionModel:
    """softmax(sum_d w_d * log o_d + c); ``params`` holds ``w`` and ``c``."""

    def __init__(self, n_systems, n_classes):
        self.n_systems, self.n_classes = n_systems, n_classes
        self.params = ParamSet()
        self.params.add("w", np.full(n_systems, 1.0 / n_systems))
        self.params.add("c", np.zeros(n_classes))
        self.calibration_domain = None
        self.n_iter = 0
        self.grad_norm = float("nan")

    @property
    def w(self):
        return self.params["w"]

    @property
    def c(self):
        return self.params["c"]

    @staticmethod
    def log_scores(O):
        return np.log(np.maximum(np.asarray(O, dtype=np.float64), LOG_FLOOR))

    def _logits(self, O):
        O = np.asarray(O, dtype=np.float64)
        if O.ndim != 3 or O.shape[1:] != (self.n_systems, self.n_classes):
            raise FusionError(f"posteriors shaped {O.shape}, expected (n, {self.n_systems}, {self.n_classes})")
        return np.einsum("d,ndk->nk", self.w, self.log_scores(O)) + self.c

    def predict(self, O, X=None):
        return nnet.softmax(self._logits(O), axis=1)

    def loss(self, inputs, labels):
        return nnet.batch_softmax_xent(self._logits(inputs[0]), labels)[0]

    def loss_and_grad(self, inputs, labels):
        O = inputs[0]
        loss, _, d = nnet.batch_softmax_xent(self._logits(O), labels)
        self.params.grads["w"] += np.einsum("nk,ndk->d", d, self.log_scores(O))
        self.params.grads["c"] += d.sum(axis=0)
        return loss


def lr_fusion_train(O, labels, max_iter=200, tol=1e-7, calibration_domain=None):
    """Maximise the multinomial log-likelihood with damped Newton steps until
    the gradient norm drops below ``tol`` (or ``max_iter`` is reached).
    """
    O = np.asarray(O, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, N, L = O.shape
    if n == 0:
        raise FusionError("empty calibration set")
    if np.unique(labels).size < 2:
        raise FusionError("calibration set contains a single class; fusion is degenerate")
    model = LrFusionModel(N, L)
    model.calibration_domain = calibration_domain
    ell = model.log_scores(O)
    inputs = (O, None)
    eye = np.eye(L)

    def grad():
        model.params.zero_grad()
        f = model.loss_and_grad(inputs, labels)
        return f, np.concatenate([model.params.grads["w"], model.params.grads["c"]])

    f, g = grad()
    it = 0
    while np.linalg.norm(g) >= tol and it < max_iter:
        P = model.predict(O)
        # per-sample Jacobian of logits wrt theta = [w, c]: (n, L, N + L)
        J = np.concatenate([np.transpose(ell, (0, 2, 1)), np.broadcast_to(eye, (n, L, L))], axis=2)
        S = P[:, :, None] * eye[None] - P[:, :, None] * P[:, None, :]
        H = np.einsum("nka,nkl,nlb->ab", J, S, J) / n
        step = np.linalg.lstsq(H, -g, rcond=1e-12)[0]
        theta = np.concatenate([model.w, model.c])
        t = 1.0
        while True:
            model.params.set_values({"w": (theta + t * step)[:N], "c": (theta + t * step)[N:]})
            f_new = model.loss(inputs, labels)
            if f_new <= f + 1e-4 * t * (g @ step) or t < 1e-10:
                break
            t *= 0.5
        f, g = grad()
        it += 1
    model.n_iter, model.grad_norm = it, float(np.linalg.norm(g))
    return model


def lr_fusion_apply(model, O):
    return model.predict(O)


def align_scores(system_scores):
    """Stack per-system UtteranceScore lists into (n, N, L) after checking ids."""
    names = list(system_scores)
    ref = [s.utt_id for s in system_scores[names[0]]]
    for name in names[1:]:
        ids = [s.utt_id for s in system_scores[name]]
        if ids != ref:
            raise FusionError(f"utterance ids of system {name!r} do not align with {names[0]!r}")
    O = np.stack([np.stack([s.o for s in system_scores[k]]) for k in names], axis=1)
    return ref, O


# ---------------------------------------------------------------------------
# Training against frozen base networks


def base_outputs(nets, xs):
    """Run frozen networks over features: returns O (n, N, L) and H list."""
    O, H = [], []
    for net in nets:
        outs = [net.forward(x) for x in xs]
        O.append(np.stack([s.o for s in outs]))
        H.append(np.stack([s.h for s in outs]))
    return np.stack(O, axis=1), H


def _frozen(nets, fn):
    before = [hashlib.sha256(n.params.to_bytes()).hexdigest() for n in nets]
    out = fn()
    after = [hashlib.sha256(n.params.to_bytes()).hexdigest() for n in nets]
    if before != after:
        raise FreezeViolation("base network parameters changed during fusion training")
    return out


def train_attentive(nets, domain_order, xs, labels, variant="output", m=DEFAULT_M,
                    cfg=None, seed=0):
    if len(nets) < 2:
        raise FusionError("attentive fusion needs at least 2 domain systems")
    cfg = cfg or FusionTrainConfig(seed=seed)

    def run():
        O, H = base_outputs(nets, xs)
        return fit_attentive(O, H, labels, domain_order, variant, m, cfg, seed)

    return _frozen(nets, run)


def fit_attentive(O, H, labels, domain_order, variant="output", m=DEFAULT_M, cfg=None, seed=0,
                  normalise=True):
    cfg = cfg or FusionTrainConfig(seed=seed)
    X = head_inputs(variant, O, H)
    model = AttentiveFusionModel(domain_order, O.shape[2], [x.shape[1] for x in X], variant, m, seed)
    if normalise:
        model.set_input_stats(X)
    model.history = fit(model, (O, X), labels, cfg)
    return model


def train_fusion_layer(nets, xs, labels, cfg=None, seed=0, hidden=FUSION_HIDDEN):
    if len(nets) < 2:
        raise FusionError("fusion layer needs at least 2 systems")
    cfg = cfg or FusionTrainConfig(seed=seed)

    def run():
        O, _ = base_outputs(nets, xs)
        return fit_fusion_layer(O, labels, cfg, seed, hidden)

    return _frozen(nets, run)


def fit_fusion_layer(O, labels, cfg=None, seed=0, hidden=FUSION_HIDDEN):
    cfg = cfg or FusionTrainConfig(seed=seed)
    model = FusionLayerModel(O.shape[1], O.shape[2], hidden, seed)
    model.history = fit(model, (O, []), labels, cfg)
    return model


# ---------------------------------------------------------------------------
# Persistence: DIDM container + sidecar with base-model hashes


def save_fusion(path, model, kind, bases, label_names):
    """``bases`` is a list of (system_id, model_path); hashes are recorded."""
    path = Path(path)
    base_meta = []
    for sys_id, bpath in bases:
        bpath = Path(bpath)
        base_meta.append({
            "system": sys_id,
            "path": str(Path(_relpath(bpath, path.parent))),
            "sha256": hashlib.sha256(bpath.read_bytes()).hexdigest(),
        })
    meta = {"kind": "fusion", "fusion_kind": kind, "label_names": list(label_names),
            "bases": base_meta, "n_classes": len(label_names)}
    if kind == "attentive":
        meta.update(variant=model.variant, m=model.m, domain_order=model.domain_order,
                    input_dims=model.input_dims)
    elif kind == "fusion_layer":
        meta.update(hidden=model.hidden, n_systems=model.n_systems)
    elif kind == "lr":
        meta.update(n_systems=model.n_systems, calibration_domain=model.calibration_domain)
    else:
        raise FusionError(f"unknown fusion kind {kind!r}")
    tensors = dict(model.params.values)
    tensors.update(getattr(model, "buffers", {}))
    nnet.save_container(path, tensors, meta)


def _relpath(target, start):
    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


def load_fusion(path, verify=True):
    """Return (model, meta, base_paths). Refuses mismatched base models."""
    path = Path(path)
    tensors, meta = nnet.load_container(path)
    if meta.get("kind") != "fusion":
        raise FusionError(f"{path}: not a fusion model")
    base_paths = []
    for b in meta["bases"]:
        bp = (path.parent / b["path"]).resolve()
        if verify:
            if not bp.is_file():
                raise FusionError(f"{path}: base model {bp} missing")
            digest = hashlib.sha256(bp.read_bytes()).hexdigest()
            if digest != b["sha256"]:
                raise FusionError(f"{path}: base model {bp} does not match recorded hash")
        base_paths.append(bp)
    L = meta["n_classes"]
    kind = meta["fusion_kind"]
    if kind == "attentive":
        model = AttentiveFusionModel(meta["domain_order"], L, meta["input_dims"], meta["variant"], meta["m"])
    elif kind == "fusion_layer":
        model = FusionLayerModel(meta["n_systems"], L, meta["hidden"])
    elif kind == "lr":
        model = LrFusionModel(meta["n_systems"], L)
        model.calibration_domain = meta.get("calibration_domain")
    else:
        raise FusionError(f"{path}: unknown fusion kind {kind!r}")
    buffers = {k: v for k, v in tensors.items() if k.startswith("norm.")}
    params = {k: v for k, v in tensors.items() if not k.startswith("norm.")}
    if set(params) != set(model.params.names()):
        raise FusionError(f"{path}: tensor names do not match the fusion model")
    model.params.set_values(params)
    if buffers:
        model.buffers.update(buffers)
    return model, meta, base_paths


def predict_with(model, kind, O, H):
    if kind == "attentive":
        return model.predict(O, head_inputs(model.variant, O, H))
    return model.predict(O)

