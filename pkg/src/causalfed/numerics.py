"""Small float64 neural-network substrate: MLP / LeNet featurizers, a linear
head, cross-entropy, SGD and a finite-difference gradient oracle.

A model is split into a featurizer ``phi`` (client side) producing hidden
representations ``h`` of width ``d`` and a bias-free head ``W`` of shape
``(d, K)`` (server side) so that logits are ``z = h @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from causalfed.errors import ConfigurationError, InputError, NumericError, ShapeError, StateError

KERNEL = 5
POOL = 2


@dataclass(frozen=True)
class ArchSpec:
    arch_tag: str = "mlp"
    input_shape: tuple[int, ...] = (1, 28, 28)
    hidden: tuple[int, ...] = (256, 256)
    n_classes: int = 10
    conv_channels: tuple[int, int] = (6, 16)

    @property
    def d(self) -> int:
        return self.hidden[-1]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def validate(self) -> None:
        if self.arch_tag not in ("mlp", "lenet"):
            raise ConfigurationError(f"unknown arch_tag {self.arch_tag!r}")
        if not self.hidden or any(int(w) < 1 for w in self.hidden):
            raise ConfigurationError(f"hidden widths must all be >= 1, got {self.hidden}")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.arch_tag == "lenet":
            if len(self.input_shape) != 3:
                raise ConfigurationError("lenet expects a (C, H, W) input shape")
            _, hgt, wid = self.input_shape
            for size in (hgt, wid):
                s1 = size - KERNEL + 1
                if s1 <= 0 or s1 % POOL:
                    raise ConfigurationError(f"input size {size} incompatible with 5x5 conv + 2x2 pool")
                s2 = s1 // POOL - KERNEL + 1
                if s2 <= 0 or s2 % POOL:
                    raise ConfigurationError(f"input size {size} incompatible with second conv block")
            if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
                raise ConfigurationError("lenet needs two positive conv channel counts")

    def featurizer_shapes(self) -> list[tuple[int, ...]]:
        """Weight/bias shapes of the featurizer, in storage order."""
        if self.arch_tag == "mlp":
            dims = [self.input_dim, *self.hidden]
            shapes: list[tuple[int, ...]] = []
            for a, b in zip(dims[:-1], dims[1:]):
                shapes += [(a, b), (b,)]
            return shapes
        c, hgt, wid = self.input_shape
        c1, c2 = self.conv_channels
        oh = ((hgt - KERNEL + 1) // POOL - KERNEL + 1) // POOL
        ow = ((wid - KERNEL + 1) // POOL - KERNEL + 1) // POOL
        shapes = [(c1, c, KERNEL, KERNEL), (c1,), (c2, c1, KERNEL, KERNEL), (c2,)]
        dims = [c2 * oh * ow, *self.hidden]
        for a, b in zip(dims[:-1], dims[1:]):
            shapes += [(a, b), (b,)]
        return shapes

    def to_dict(self) -> dict:
        return {
            "arch_tag": self.arch_tag,
            "input_shape": list(self.input_shape),
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
            "conv_channels": list(self.conv_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            arch_tag=d.get("arch_tag", "mlp"),
            input_shape=tuple(d.get("input_shape", (1, 28, 28))),
            hidden=tuple(d.get("hidden", (256, 256))),
            n_classes=int(d.get("n_classes", 10)),
            conv_channels=tuple(d.get("conv_channels", (6, 16))),
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelParams:
    """Featurizer tensors, server head and the constant IRM dummy scale."""

    arch: ArchSpec
    featurizer: tuple[np.ndarray, ...]
    head: np.ndarray
    dummy_w: float = field(default=1.0, init=False)

    def __post_init__(self):
        object.__setattr__(self, "featurizer", tuple(_frozen(p) for p in self.featurizer))
        object.__setattr__(self, "head", _frozen(self.head))
        expected = self.arch.featurizer_shapes()
        got = [p.shape for p in self.featurizer]
        if got != expected:
            raise ShapeError(f"featurizer shapes {got} do not match {self.arch.arch_tag} spec {expected}")
        if self.head.shape != (self.arch.d, self.arch.n_classes):
            raise ShapeError(f"head shape {self.head.shape} != {(self.arch.d, self.arch.n_classes)}")

    def replace(self, featurizer=None, head=None) -> "ModelParams":
        return ModelParams(
            self.arch,
            self.featurizer if featurizer is None else featurizer,
            self.head if head is None else head,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in (*self.featurizer, self.head)])


@dataclass(frozen=True)
class Gradients:
    featurizer: tuple[np.ndarray, ...] | None = None
    head: np.ndarray | None = None

    def __add__(self, other: "Gradients") -> "Gradients":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            if isinstance(a, tuple):
                return tuple(x + y for x, y in zip(a, b))
            return a + b

        return Gradients(add(self.featurizer, other.featurizer), add(self.head, other.head))


@dataclass
class ForwardCache:
    featurizer: tuple[np.ndarray, ...]
    head: np.ndarray
    arch: ArchSpec
    x: np.ndarray
    acts: list = field(default_factory=list)
    h: np.ndarray | None = None


def init_params(spec: ArchSpec, seed: int) -> ModelParams:
    """Xavier-uniform weights, zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors = []
    for shape in spec.featurizer_shapes():
        if len(shape) == 1:
            tensors.append(np.zeros(shape))
            continue
        if len(shape) == 4:
            fan_out = shape[0] * shape[2] * shape[3]
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in, fan_out = shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        tensors.append(rng.uniform(-a, a, size=shape))
    d, k = spec.d, spec.n_classes
    a = np.sqrt(6.0 / (d + k))
    head = rng.uniform(-a, a, size=(d, k))
    return ModelParams(spec, tuple(tensors), head)


# --- conv / pool helpers -----------------------------------------------------


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, c, hgt, wid = x.shape
    f, _, kh, kw = w.shape
    oh, ow = hgt - kh + 1, wid - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, oh, ow, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout: np.ndarray, cols: np.ndarray, x_shape, w: np.ndarray):
    n, c, hgt, wid = x_shape
    f, _, kh, kw = w.shape
    oh, ow = hgt - kh + 1, wid - kw + 1
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx, dw, db


def _pool_forward(x: np.ndarray):
    n, c, hgt, wid = x.shape
    blocks = x.reshape(n, c, hgt // POOL, POOL, wid // POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, hgt // POOL, wid // POOL, POOL * POOL)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dout: np.ndarray, arg: np.ndarray, x_shape):
    n, c, hgt, wid = x_shape
    blocks = np.zeros((n, c, hgt // POOL, wid // POOL, POOL * POOL))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, hgt // POOL, wid // POOL, POOL, POOL).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(x_shape)


# --- forward / backward ------------------------------------------------------


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    spec = params.arch
    if batch.ndim < 1 or batch.shape[0] < 1:
        raise ShapeError("empty batch")
    if batch.shape[1:] == tuple(spec.input_shape):
        return batch
    if batch.ndim == 2 and batch.shape[1] == spec.input_dim:
        return batch.reshape(batch.shape[0], *spec.input_shape)
    raise ShapeError(f"batch shape {batch.shape[1:]} does not match input {tuple(spec.input_shape)}")


def featurize(params: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Client-side half of :func:`forward`: ``h = phi(batch)``."""
    x = _check_batch(params, batch)
    cache = ForwardCache(params.featurizer, params.head, params.arch, x)
    p = params.featurizer
    if params.arch.arch_tag == "mlp":
        a = x.reshape(x.shape[0], -1)
        dense = p
    else:
        a = x
        for w, b in ((p[0], p[1]), (p[2], p[3])):
            pre, cols = _conv_forward(a, w, b)
            rel = np.maximum(pre, 0.0)
            pooled, arg = _pool_forward(rel)
            cache.acts.append((a.shape, cols, pre, arg))
            a = pooled
        a = a.reshape(a.shape[0], -1)
        dense = p[4:]
    for w, b in zip(dense[0::2], dense[1::2]):
        pre = a @ w + b
        cache.acts.append((a, pre))
        a = np.maximum(pre, 0.0)
    cache.h = a
    return a, cache


def forward(params: ModelParams, batch: np.ndarray):
    """Returns ``(h, z, cache)`` with ``h = phi(batch)`` and ``z = h @ W``."""
    h, cache = featurize(params, batch)
    return h, h @ params.head, cache


def predict_logits(params: ModelParams, batch: np.ndarray, chunk: int = 2048) -> np.ndarray:
    batch = np.asarray(batch)
    out = [forward(params, batch[i:i + chunk])[1] for i in range(0, batch.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def featurizer_backward(params: ModelParams, cache: ForwardCache, grad_h: np.ndarray) -> tuple[np.ndarray, ...]:
    """Backpropagates ``dL/dh`` through the featurizer that produced ``cache``."""
    if cache.featurizer is not params.featurizer or cache.h is None:
        raise StateError("forward cache does not belong to these featurizer parameters")
    grad_h = np.asarray(grad_h, dtype=np.float64)
    if grad_h.shape != cache.h.shape:
        raise ShapeError(f"grad_h shape {grad_h.shape} != h shape {cache.h.shape}")
    p = params.featurizer
    n_conv = 2 if params.arch.arch_tag == "lenet" else 0
    dense_acts = cache.acts[n_conv:]
    dense = p[4:] if n_conv else p
    grads: list[np.ndarray] = []
    g = grad_h
    for (a, pre), w in zip(reversed(dense_acts), reversed(dense[0::2])):
        g = g * (pre > 0)
        grads = [a.T @ g, g.sum(axis=0)] + grads
        g = g @ w.T
    if n_conv:
        g = g.reshape(cache.acts[1][2].shape[0], p[2].shape[0], *_pooled_hw(cache.acts[1][2]))
        conv_grads: list[np.ndarray] = []
        for (x_shape, cols, pre, arg), w in zip(reversed(cache.acts[:2]), (p[2], p[0])):
            g = _pool_backward(g, arg, pre.shape) * (pre > 0)
            g, dw, db = _conv_backward(g, cols, x_shape, w)
            conv_grads = [dw, db] + conv_grads
        grads = conv_grads + grads
    return tuple(grads)


def _pooled_hw(pre: np.ndarray) -> tuple[int, int]:
    return pre.shape[2] // POOL, pre.shape[3] // POOL


def backward(params: ModelParams, cache: ForwardCache, grad_z: np.ndarray):
    """Exact reverse-mode gradients given ``dL/dz``.

    Returns ``(grad_featurizer, grad_head, grad_h)``; ``grad_h`` is what a
    split-learning server ships back to the client.
    """
    if cache.head is not params.head:
        raise StateError("forward cache does not belong to this head")
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if cache.h is None or grad_z.shape != (cache.h.shape[0], params.arch.n_classes):
        raise ShapeError("grad_z shape does not match cached logits")
    grad_head = cache.h.T @ grad_z
    grad_h = grad_z @ params.head.T
    return featurizer_backward(params, cache, grad_h), grad_head, grad_h


# --- losses ------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InputError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= k):
        raise InputError(f"labels must lie in [0, {k})")
    return y


def per_example_loss(z: np.ndarray, labels) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    y = _check_labels(labels, z.shape[0], z.shape[1])
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(z.shape[0]), y]


def softmax_cross_entropy(z: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax(z) - onehot(y)) / N``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ShapeError(f"logits must be a non-empty N x K matrix, got {z.shape}")
    y = _check_labels(labels, z.shape[0], z.shape[1])
    n = z.shape[0]
    loss = float(per_example_loss(z, y).mean())
    grad = softmax(z)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


# --- optimisation ------------------------------------------------------------


def sgd_step(params: ModelParams, grads: Gradients, eta: float) -> ModelParams:
    """``p <- p - eta * g`` for every tensor that has a gradient."""
    if not eta > 0:
        raise ConfigurationError(f"learning rate must be positive, got {eta}")
    featurizer = params.featurizer
    if grads.featurizer is not None:
        if len(grads.featurizer) != len(featurizer):
            raise ShapeError("gradient list length does not match featurizer")
        new = []
        for p, g in zip(featurizer, grads.featurizer):
            if p.shape != np.shape(g):
                raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
            new.append(p - eta * g)
        featurizer = tuple(new)
    head = params.head
    if grads.head is not None:
        if np.shape(grads.head) != head.shape:
            raise ShapeError(f"head gradient shape {np.shape(grads.head)} != {head.shape}")
        head = head - eta * grads.head
    return params.replace(featurizer=featurizer, head=head)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    if not eps > 0:
        raise InputError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fp = float(f(x))
        flat_x[i] = orig - eps
        fm = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        flat_g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def weighted_average(tensor_lists: Sequence[Sequence[np.ndarray]], weights: Sequence[float]) -> list[np.ndarray]:
    """Element-wise weighted mean of equally-shaped tensor lists."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    out = []
    for parts in zip(*tensor_lists):
        acc = np.zeros_like(parts[0], dtype=np.float64)
        for wi, p in zip(w, parts):
            acc = acc + wi * p
        out.append(acc)
    return out
