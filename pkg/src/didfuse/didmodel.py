"""End-to-end dialect ID network: four 1-D conv layers, global pooling, two
feed-forward layers and a softmax head, trained with plain SGD.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import featext, nnet
from .nnet import Conv1D, Dense, GlobalPool, LrSchedule, ParamSet, ReLU

PAPER_CONV = ((5, 1, 500), (7, 2, 500), (1, 1, 500), (1, 1, 3000))
PAPER_FF = (1500, 600)
TOY_CONV = ((5, 1, 32), (7, 2, 32), (1, 1, 32), (1, 1, 128))
TOY_FF = (64, 32)


class MinimumLengthError(nnet.ShapeError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class DidArchConfig:
    conv_specs: tuple = PAPER_CONV  # (kernel_width, stride, out_channels)
    ff_sizes: tuple = PAPER_FF
    n_classes: int = 5
    width_multiplier: float = 1.0
    input_dim: int = featext.N_CEPS
    pool_std: bool = False

    def __post_init__(self):
        self.conv_specs = tuple(tuple(int(v) for v in s) for s in self.conv_specs)
        self.ff_sizes = tuple(int(v) for v in self.ff_sizes)
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        if not self.conv_specs or not self.ff_sizes:
            raise ValueError("need at least one conv and one feed-forward layer")
        for k, s, c in self.conv_specs:
            if k < 1 or s < 1 or c < 1:
                raise ValueError(f"bad conv spec {(k, s, c)}")

    @classmethod
    def profile(cls, name, n_classes=5, width_multiplier=1.0, pool_std=False):
        if name == "paper":
            conv, ff = PAPER_CONV, PAPER_FF
        elif name == "toy":
            conv, ff = TOY_CONV, TOY_FF
        else:
            raise ValueError(f"unknown profile {name!r} (expected 'paper' or 'toy')")
        return cls(conv, ff, n_classes, width_multiplier, pool_std=pool_std)

    def scaled(self, n):
        return max(1, int(round(n * self.width_multiplier)))

    @property
    def hidden_dim(self):
        return self.scaled(self.ff_sizes[-1])

    def min_frames(self):
        need = 1
        for k, s, _ in reversed(self.conv_specs):
            need = (need - 1) * s + k
        return need

    def to_dict(self):
        d = asdict(self)
        d["conv_specs"] = [list(s) for s in self.conv_specs]
        d["ff_sizes"] = list(self.ff_sizes)
        return d


@dataclass
class UtteranceScore:
    utt_id: str
    o: np.ndarray
    h: np.ndarray


class DidNetwork:
    def __init__(self, arch, label_names, seed=0):
        if len(label_names) != arch.n_classes:
            raise ValueError(f"{len(label_names)} labels for {arch.n_classes} classes")
        if len(set(label_names)) != len(label_names):
            raise ValueError("label names must be unique")
        self.arch = arch
        self.label_names = list(label_names)
        self.train_meta = {"seed": seed}
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        self.convs, self.acts = [], []
        cin = arch.input_dim
        for i, (k, s, c) in enumerate(arch.conv_specs):
            cout = arch.scaled(c)
            self.convs.append(Conv1D(self.params, f"conv{i}", cin, cout, k, s, rng))
            self.acts.append(ReLU())
            cin = cout
        self.pool = GlobalPool(arch.pool_std)
        n_in = cin * (2 if arch.pool_std else 1)
        self.ffs, self.ff_acts = [], []
        for i, n in enumerate(arch.ff_sizes):
            n_out = arch.scaled(n)
            self.ffs.append(Dense(self.params, f"ff{i}", n_in, n_out, rng))
            self.ff_acts.append(ReLU())
            n_in = n_out
        self.out = Dense(self.params, "out", n_in, arch.n_classes, rng)

    # -- forward / backward -------------------------------------------------

    def _check_length(self, x, utt_id=""):
        need = self.arch.min_frames()
        if x.shape[0] < need:
            raise MinimumLengthError(
                f"{utt_id or 'utterance'}: {x.shape[0]} frames, network needs >= {need}"
            )
        if x.shape[1] != self.arch.input_dim:
            raise nnet.ShapeError(f"{utt_id}: feature dim {x.shape[1]} != {self.arch.input_dim}")

    def logits_hidden(self, x, utt_id=""):
        x = np.asarray(x, dtype=np.float64)
        self._check_length(x, utt_id)
        for conv, act in zip(self.convs, self.acts):
            x = act.forward(conv.forward(x))
        x = self.pool.forward(x)
        for ff, act in zip(self.ffs, self.ff_acts):
            x = act.forward(ff.forward(x))
        return self.out.forward(x), x

    def backward(self, dlogits):
        d = self.out.backward(dlogits)
        for ff, act in zip(reversed(self.ffs), reversed(self.ff_acts)):
            d = ff.backward(act.backward(d))
        d = self.pool.backward(d)
        for conv, act in zip(reversed(self.convs), reversed(self.acts)):
            d = conv.backward(act.backward(d))
        return d

    def forward(self, feats):
        if isinstance(feats, featext.FeatureMatrix):
            x, utt_id = feats.frames, feats.utt_id
        else:
            x, utt_id = feats, ""
        logits, h = self.logits_hidden(x, utt_id)
        return UtteranceScore(utt_id, nnet.softmax(logits), h.copy())

    # grad_check protocol: mean cross-entropy over a list of utterances
    def loss(self, xs, labels):
        total = 0.0
        for x, y in zip(xs, labels):
            logits, _ = self.logits_hidden(x)
            total += nnet.softmax_xent(logits, y)[0]
        return total / len(xs)

    def loss_and_grad(self, xs, labels):
        total = 0.0
        for x, y in zip(xs, labels):
            logits, _ = self.logits_hidden(x)
            loss, _, d = nnet.softmax_xent(logits, y)
            total += loss
            self.backward(d / len(xs))
        return total / len(xs)

    def digest(self):
        return hashlib.sha256(self.params.to_bytes()).hexdigest()


def build(arch, seed=0, label_names=None):
    if label_names is None:
        label_names = [f"dialect_{i + 1}" for i in range(arch.n_classes)]
    return DidNetwork(arch, label_names, seed)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    schedule: LrSchedule = field(default_factory=LrSchedule)
    epochs: int = 10
    batch_size: int = 1
    seed: int = 0
    holdout_fraction: float = 0.05


def load_examples(manifest, label_names):
    """Read features for every row; returns (ids, arrays, label indices)."""
    index = {n: i for i, n in enumerate(label_names)}
    missing = manifest.missing_files()
    if missing:
        raise FileNotFoundError(f"{len(missing)} feature files missing: {', '.join(missing[:5])}")
    ids, xs, ys = [], [], []
    for row in manifest.rows:
        if row.dialect not in index:
            raise TrainingError(f"{row.utt_id}: unknown label {row.dialect!r}")
        xs.append(featext.read_features(manifest.resolve(row), row.utt_id).frames)
        ids.append(row.utt_id)
        ys.append(index[row.dialect])
    return ids, xs, np.array(ys, dtype=np.int64)


def _evaluate(net, xs, ys):
    if not xs:
        return float("nan"), float("nan")
    loss, correct = 0.0, 0
    for x, y in zip(xs, ys):
        logits, _ = net.logits_hidden(x)
        loss += nnet.softmax_xent(logits, y)[0]
        correct += int(np.argmax(logits) == y)
    return loss / len(xs), correct / len(xs)


def train(net, xs, ys, cfg, log=None):
    """SGD on cross-entropy. The last ``holdout_fraction`` of a seeded shuffle
    is held out for monitoring only. Returns a list of per-epoch records.
    """
    n = len(xs)
    if n == 0:
        raise TrainingError("empty training set")
    if cfg.batch_size < 1 or cfg.epochs < 0:
        raise TrainingError("batch_size must be >= 1 and epochs >= 0")
    for x in xs:
        net._check_length(x)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_hold = int(math.ceil(cfg.holdout_fraction * n)) if n > 1 else 0
    train_idx, hold_idx = order[: n - n_hold], order[n - n_hold:]
    hold_x = [xs[i] for i in hold_idx]
    hold_y = ys[hold_idx]

    loss0, acc0 = _evaluate(net, hold_x, hold_y)
    history = [{"epoch": 0, "step": 0, "train_loss": None, "train_acc": None,
                "heldout_loss": loss0, "heldout_acc": acc0}]
    step = 0
    bs = cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        perm = train_idx[rng.permutation(len(train_idx))]
        tot_loss, correct = 0.0, 0
        for start in range(0, len(perm), bs):
            batch = perm[start:start + bs]
            net.params.zero_grad()
            for i in batch:
                logits, _ = net.logits_hidden(xs[i])
                loss, _, d = nnet.softmax_xent(logits, ys[i])
                tot_loss += loss
                correct += int(np.argmax(logits) == ys[i])
                net.backward(d / len(batch))
            nnet.sgd_step(net.params, cfg.schedule, step)
            step += 1
        h_loss, h_acc = _evaluate(net, hold_x, hold_y)
        rec = {"epoch": epoch, "step": step,
               "train_loss": tot_loss / len(perm), "train_acc": correct / len(perm),
               "heldout_loss": h_loss, "heldout_acc": h_acc}
        history.append(rec)
        if log is not None:
            log(f"epoch {rec['epoch']}: loss {rec['train_loss']:.4f} acc {rec['train_acc']:.3f}"
                f" | held-out loss {rec['heldout_loss']:.4f} acc {rec['heldout_acc']:.3f}")
    net.train_meta.update({"steps": step, "epochs": cfg.epochs, "train_seed": cfg.seed,
                           "n_train": len(train_idx), "n_heldout": n_hold})
    return history


# ---------------------------------------------------------------------------
# Scoring and persistence


def score(net, ids, xs):
    return [net.forward(featext.FeatureMatrix(x, u)) for u, x in zip(ids, xs)]


def score_manifest(net, manifest):
    missing = manifest.missing_files()
    if missing:
        raise FileNotFoundError(f"missing feature files: {', '.join(missing)}")
    ids, xs = [], []
    for row in manifest.rows:
        ids.append(row.utt_id)
        xs.append(featext.read_features(manifest.resolve(row), row.utt_id).frames)
    return score(net, ids, xs)


def write_scores(path, label_names, scores, with_hidden=False):
    cols = ["utt_id"] + list(label_names)
    if with_hidden:
        hdim = len(scores[0].h) if scores else 0
        cols += [f"h_{i + 1}" for i in range(hdim)]
    lines = ["\t".join(cols)]
    for s in scores:
        vals = list(s.o) + (list(s.h) if with_hidden else [])
        lines.append("\t".join([s.utt_id] + [f"{v:.9g}" for v in vals]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path):
    """Return (label_names, [UtteranceScore]) from a scores TSV."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("utt_id"):
        raise ValueError(f"{path}: missing scores header")
    header = lines[0].split("\t")[1:]
    labels = [c for c in header if not c.startswith("h_")]
    n_lab = len(labels)
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(header) + 1:
            raise ValueError(f"{path}:{lineno}: expected {len(header) + 1} fields")
        vals = np.array([float(v) for v in fields[1:]])
        out.append(UtteranceScore(fields[0], vals[:n_lab], vals[n_lab:]))
    return labels, out


def save_model(net, path):
    nnet.save_container(path, net.params.values, {
        "kind": "did",
        "arch": net.arch.to_dict(),
        "label_names": net.label_names,
        "train_meta": net.train_meta,
    })


def load_model(path):
    tensors, meta = nnet.load_container(path)
    if meta.get("kind") != "did":
        raise ValueError(f"{path}: not a DID model (kind={meta.get('kind')!r})")
    arch = DidArchConfig(**meta["arch"])
    net = DidNetwork(arch, meta["label_names"], meta["train_meta"].get("seed", 0))
    if set(tensors) != set(net.params.names()):
        raise ValueError(f"{path}: tensor names do not match the architecture")
    net.params.set_values(tensors)
    net.train_meta = meta["train_meta"]
    return net


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
