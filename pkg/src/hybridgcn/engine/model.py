"""Model definition shared by all workers: parameters, norms, loss, optimizers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from ..quant import SUPPORTED_BITS, derive_seed

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    num_layers: int = 3
    hidden: int = 64
    model: str = "sage"              # "sage" (self + neighbour weights) or "gcn" (one weight)
    aggregation: str = "mean"
    activation: str = "relu"
    norm: bool = True
    bias: bool = True
    epochs: int = 100
    lr: float = 0.01
    optimizer: str = "sgd"
    bits: int | None = None          # None: full-precision wire
    quantize_forward: bool = True
    quantize_backward: bool = True
    label_prop: bool = False
    label_rate: float = 0.62
    seed: int = 0
    quant_seed: int | None = None
    num_workers: int = 1
    backend: str = "inproc"
    kernel_threads: int = 1
    dtype: str = "float32"
    norm_eps: float = 1e-5
    timeout: float = 30.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.model not in ("sage", "gcn"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.bits is not None and self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS} or None")
        if self.label_prop and not 0.0 < self.label_rate < 1.0:
            raise ValueError("label_rate must lie in (0, 1)")
        if self.num_workers < 1:
            raise ValueError("num_workers must be >= 1")
        if self.backend not in ("inproc", "tcp"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def stream_seed(self) -> int:
        return derive_seed(self.seed, 0x51) if self.quant_seed is None else int(self.quant_seed)

    def layer_dims(self, in_dim: int, num_classes: int) -> list[int]:
        return [in_dim] + [self.hidden] * (self.num_layers - 1) + [num_classes]

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def param_names(config: TrainConfig) -> list[str]:
    names = ["embed"] if config.label_prop else []
    for l in range(config.num_layers):
        if config.norm:
            names += [f"l{l}.norm_gain", f"l{l}.norm_shift"]
        names += [f"l{l}.w_self", f"l{l}.w_neigh"] if config.model == "sage" else [f"l{l}.w"]
        if config.bias:
            names.append(f"l{l}.bias")
    return names


def init_params(config: TrainConfig, in_dim: int, num_classes: int) -> dict[str, np.ndarray]:
    """Seeded uniform(+-1/sqrt(fan_in)) weights; unit norm gain, zero shifts and biases."""
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    dims = config.layer_dims(in_dim, num_classes)
    params: dict[str, np.ndarray] = {}
    if config.label_prop:
        bound = 1.0 / np.sqrt(num_classes)
        params["embed"] = rng.uniform(-bound, bound, (num_classes, in_dim)).astype(dt)
    for l in range(config.num_layers):
        fi, fo = dims[l], dims[l + 1]
        bound = 1.0 / np.sqrt(fi)
        if config.norm:
            params[f"l{l}.norm_gain"] = np.ones(fi, dtype=dt)
            params[f"l{l}.norm_shift"] = np.zeros(fi, dtype=dt)
        keys = ("w_self", "w_neigh") if config.model == "sage" else ("w",)
        for k in keys:
            params[f"l{l}.{k}"] = rng.uniform(-bound, bound, (fi, fo)).astype(dt)
        if config.bias:
            params[f"l{l}.bias"] = np.zeros(fo, dtype=dt)
    return params


def flatten(params: dict[str, np.ndarray], names) -> np.ndarray:
    return np.concatenate([params[n].ravel() for n in names]) if names else np.zeros(0)


def unflatten(vec: np.ndarray, like: dict[str, np.ndarray], names) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for n in names:
        size = like[n].size
        out[n] = vec[pos:pos + size].reshape(like[n].shape).astype(like[n].dtype, copy=False)
        pos += size
    return out


# --------------------------------------------------------------------------
# Layer pieces
# --------------------------------------------------------------------------

def layer_norm_forward(x, gain, shift, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gain + shift, (xhat, inv_std)


def layer_norm_backward(dy, gain, cache):
    xhat, inv_std = cache
    f = xhat.shape[1]
    dgain = (dy * xhat).sum(axis=0)
    dshift = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv_std / f * (f * dxhat - dxhat.sum(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dx, dgain, dshift


def one_hot(labels, num_classes, dtype=np.float64) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    ok = labels >= 0
    out[np.flatnonzero(ok), labels[ok]] = 1
    return out


def select_label_nodes(train_mask, labels, rate: float, seed: int, epoch: int) -> np.ndarray:
    """Global boolean mask of training nodes whose labels are injected this epoch."""
    cand = np.flatnonzero(train_mask & (labels >= 0))
    if cand.size == 0:
        raise ValueError("label propagation needs labelled training nodes")
    rng = np.random.default_rng(derive_seed(seed, 0x1AB, epoch))
    k = int(round(rate * cand.size))
    chosen = np.zeros(train_mask.shape[0], dtype=bool)
    chosen[rng.choice(cand, size=k, replace=False)] = True
    return chosen


def label_propagate_setup(features, labels, selected, embed) -> np.ndarray:
    """``X + Y_sel @ W_embed`` with ``Y_sel`` one-hot only on selected nodes."""
    y = one_hot(np.where(selected, labels, -1), embed.shape[0], dtype=embed.dtype)
    return features + y @ embed


def cross_entropy(logits, labels, mask, denom: float | None = None):
    """Mean cross-entropy over ``mask`` rows and its gradient w.r.t. ``logits``.

    ``denom`` overrides the divisor (the global count when rows are spread
    over workers); the returned loss is then this worker's share.
    """
    rows = np.flatnonzero(mask)
    if denom is None:
        if rows.size == 0:
            raise ValueError("cross_entropy over an empty mask")
        denom = rows.size
    grad = np.zeros_like(logits)
    if rows.size == 0:
        return 0.0, grad
    z = logits[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = labels[rows]
    loss = -logp[np.arange(rows.size), y].sum() / denom
    p = np.exp(logp)
    p[np.arange(rows.size), y] -= 1
    grad[rows] = p / denom
    return float(loss), grad


# --------------------------------------------------------------------------
# Optimizers
# --------------------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for k in params:
            params[k] -= params[k].dtype.type(self.lr) * grads[k]


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        self.t += 1
        b1t = 1 - self.beta1 ** self.t
        b2t = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            upd = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            params[k] -= upd.astype(params[k].dtype, copy=False)


def make_optimizer(config: TrainConfig):
    return Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: dict[str, np.ndarray], path) -> None:
    """Versioned little-endian dump of every weight tensor (FP32 or FP64)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            key = name.encode()
            code = 8 if arr.dtype == np.float64 else 4
            fh.write(struct.pack("<HB B", len(key), code, arr.ndim) + key)
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=f"<f{code}").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = open(path, "rb").read()
    magic, version, count = struct.unpack_from("<4sII", buf, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    pos = 12
    out = {}
    for _ in range(count):
        klen, code, ndim = struct.unpack_from("<HBB", buf, pos)
        pos += 4
        name = buf[pos:pos + klen].decode()
        pos += klen
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, f"<f{code}", size, pos).reshape(shape).copy()
        pos += code * size
    return out
