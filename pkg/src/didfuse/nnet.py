"""Small deterministic neural-network toolkit: layers with exact backward
passes, SGD with step decay, finite-difference gradient checking, and the
DIDM binary tensor container.
"""

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    """Raised when backward is called without a recorded forward pass."""


class ContainerError(ValueError):
    pass


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamSet:
    """Named parameter tensors with gradient buffers of identical shape."""

    def __init__(self):
        self.values = {}
        self.grads = {}

    def add(self, name, value):
        if name in self.values:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self):
        return list(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def n_scalars(self):
        return sum(v.size for v in self.values.values())

    def set_values(self, arrays):
        """Copy arrays into the existing buffers (layers hold references)."""
        for name, arr in arrays.items():
            if name not in self.values:
                raise KeyError(f"unknown parameter {name!r}")
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self.values[name].shape:
                raise ShapeError(
                    f"{name}: expected shape {self.values[name].shape}, got {arr.shape}"
                )
            self.values[name][...] = arr

    def snapshot(self):
        return {k: v.copy() for k, v in self.values.items()}

    def to_bytes(self):
        return b"".join(self.values[k].tobytes() for k in self.values)


# ---------------------------------------------------------------------------
# Layers. Each forward caches what its backward needs; backward accumulates
# parameter gradients into the ParamSet and returns the input gradient.


class Conv1D:
    def __init__(self, params, name, cin, cout, kernel, stride, rng):
        self.name, self.stride, self.kernel = name, stride, kernel
        self.w = params.add(
            f"{name}.w", glorot_uniform(rng, (cout, cin, kernel), cin * kernel, cout * kernel)
        )
        self.b = params.add(f"{name}.b", np.zeros(cout))
        self.params = params
        self._cache = None

    def forward(self, x):
        if x.shape[0] < self.kernel:
            raise ShapeError(
                f"{self.name}: input {x.shape} shorter than kernel {self.w.shape}"
            )
        y, cols = kernels.conv1d_forward(
            np.ascontiguousarray(x), self.w, self.b, self.stride
        )
        self._cache = (cols, x.shape[0])
        return y

    def backward(self, dy):
        if self._cache is None:
            raise GraphError(f"{self.name}: backward before forward")
        cols, t_in = self._cache
        dx, dw, db = kernels.conv1d_backward(
            np.ascontiguousarray(dy), cols, self.w, t_in, self.stride
        )
        self.params.grads[f"{self.name}.w"] += dw
        self.params.grads[f"{self.name}.b"] += db
        return dx


class Dense:
    def __init__(self, params, name, n_in, n_out, rng, zero_init=False):
        self.name = name
        w0 = np.zeros((n_out, n_in)) if zero_init else glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        self.w = params.add(f"{name}.w", w0)
        self.b = params.add(f"{name}.b", np.zeros(n_out))
        self.params = params
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.w.shape[1]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.w.shape[1]}")
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        if self._x is None:
            raise GraphError(f"{self.name}: backward before forward")
        x = self._x
        if x.ndim == 1:
            self.params.grads[f"{self.name}.w"] += np.outer(dy, x)
            self.params.grads[f"{self.name}.b"] += dy
        else:
            self.params.grads[f"{self.name}.w"] += dy.T @ x
            self.params.grads[f"{self.name}.b"] += dy.sum(axis=0)
        return dy @ self.w


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        if self._mask is None:
            raise GraphError("relu: backward before forward")
        return np.where(self._mask, dy, 0.0)


class GlobalPool:
    """Mean over frames, optionally concatenated with the per-channel std."""

    def __init__(self, with_std=False):
        self.with_std = with_std
        self._cache = None

    def forward(self, x):
        if x.shape[0] < 1:
            raise ShapeError("global pooling over zero frames")
        mu = x.mean(axis=0)
        if not self.with_std:
            self._cache = (x.shape[0], None, None)
            return mu
        xc = x - mu
        sd = np.sqrt((xc * xc).mean(axis=0) + 1e-10)
        self._cache = (x.shape[0], xc, sd)
        return np.concatenate([mu, sd])

    def backward(self, dy):
        if self._cache is None:
            raise GraphError("pool: backward before forward")
        t, xc, sd = self._cache
        if not self.with_std:
            return np.broadcast_to(dy / t, (t, dy.shape[0])).copy()
        c = xc.shape[1]
        dmu, dsd = dy[:c], dy[c:]
        return dmu / t + xc * (dsd / (t * sd))


def relu(x):
    return np.maximum(x, 0.0)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def global_mean_pool(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"pooling needs a non-empty T x C input, got {x.shape}")
    return x.mean(axis=0)


def conv1d(x, kernel, bias, stride=1):
    x = np.ascontiguousarray(x, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {kernel.shape}")
    if x.shape[0] < kernel.shape[2]:
        raise ShapeError(f"conv1d: input {x.shape} shorter than kernel {kernel.shape}")
    y, _ = kernels.conv1d_forward(x, kernel, np.ascontiguousarray(bias, dtype=np.float64), stride)
    return y


def dense(x, w, b):
    x, w, b = (np.asarray(a, dtype=np.float64) for a in (x, w, b))
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w.T + b


def softmax_xent(logits, label):
    """Cross-entropy of one example; returns (loss, posterior, dloss/dlogits)."""
    p = softmax(logits)
    loss = -math.log(max(p[label], 1e-300))
    d = p.copy()
    d[label] -= 1.0
    return loss, p, d


def batch_softmax_xent(logits, labels):
    """Mean cross-entropy over a batch of rows."""
    p = softmax(logits, axis=1)
    n = logits.shape[0]
    idx = np.arange(n)
    loss = float(-np.mean(np.log(np.maximum(p[idx, labels], 1e-300))))
    d = p.copy()
    d[idx, labels] -= 1.0
    return loss, p, d / n


# ---------------------------------------------------------------------------
# Optimisation


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.001
    decay_factor: float = 0.98
    decay_interval: int = 50_000

    def __post_init__(self):
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_interval < 1:
            raise ValueError("decay_interval must be >= 1")

    def lr(self, step):
        return self.base_lr * self.decay_factor ** (step // self.decay_interval)


def sgd_step(params, schedule, step_index):
    lr = schedule.lr(step_index)
    for name, value in params.values.items():
        value -= lr * params.grads[name]
    return lr


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(model, inputs, labels, n_coords=200, eps=1e-5, seed=0):
    """Max relative error between analytic and central-difference gradients.

    ``model`` must expose ``params`` (a ParamSet), ``loss(inputs, labels)`` and
    ``loss_and_grad(inputs, labels)``; the latter fills ``params.grads``.
    At most ``n_coords`` coordinates are sampled (all of them if fewer exist).
    """
    params = model.params
    params.zero_grad()
    model.loss_and_grad(inputs, labels)
    analytic = {k: g.copy() for k, g in params.grads.items()}

    index = [(name, i) for name in params.names() for i in range(params[name].size)]
    rng = np.random.default_rng(seed)
    if len(index) > n_coords:
        picks = rng.choice(len(index), size=n_coords, replace=False)
        index = [index[i] for i in sorted(picks)]

    worst = 0.0
    for name, i in index:
        flat = params[name].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        up = model.loss(inputs, labels)
        flat[i] = old - eps
        down = model.loss(inputs, labels)
        flat[i] = old
        num = (up - down) / (2 * eps)
        ana = analytic[name].reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# DIDM container: magic, u32 version, u32 count, then per tensor
# u16 name length, utf-8 name, u8 rank, u32 dims, little-endian f32 data.

MODEL_MAGIC = b"DIDM"
MODEL_VERSION = 1


def encode_tensors(tensors):
    out = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_tensors(buf):
    if buf[:4] != MODEL_MAGIC:
        raise ContainerError(f"bad magic {buf[:4]!r}, expected {MODEL_MAGIC!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != MODEL_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            if name in tensors:
                raise ContainerError(f"duplicate tensor {name!r}")
            tensors[name] = data.astype(np.float64).reshape(dims)
    except (struct.error, ValueError) as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last tensor")
    return tensors


def save_container(path, tensors, meta):
    """Write ``path`` (DIDM) and its JSON sidecar ``path + '.json'``."""
    path = Path(path)
    path.write_bytes(encode_tensors(tensors))
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_container(path):
    path = Path(path)
    tensors = decode_tensors(path.read_bytes())
    meta = json.loads(sidecar_path(path).read_text())
    return tensors, meta


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def round_to_f32(params):
    """Round parameters in place to what the container will store."""
    for v in params.values.values():
        v[...] = v.astype(np.float32).astype(np.float64)
