"""Differentiable primitives. Each returns a new Tensor and, under a Tape, records its backward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, current_tape


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, backward) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise / structural


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(a.data @ b.data, (a, b), back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_t(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([x.data for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# ---------------------------------------------------------------- layers

ROW_BLOCK = 64


def linear(x, w, b=None) -> Tensor:
    """y = x W + b over the last axis of x; W has shape (in, out)."""
    x, w = _t(x), _t(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None:
        b = _t(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    # BLAS picks gemv or edge-tile kernels for some row counts, and those round
    # differently; zero-padding to whole row blocks keeps each row's result batch-invariant
    m = x2.shape[0]
    pad = -m % ROW_BLOCK
    if pad:
        y2 = (np.concatenate([x2, np.zeros((pad, x2.shape[1]), x2.dtype)]) @ w.data)[:m]
    else:
        y2 = x2 @ w.data
    if b is not None:
        y2 = y2 + b.data
    y = y2.reshape(*lead, w.shape[1])

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(y, inputs, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learnable affine map."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        dxhat = g * gamma.data
        gx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(y.astype(x.dtype), (x, gamma, beta), back)


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-feature normalization over the batch axis of a (B, C) input.

    Training mode uses batch statistics and updates the running estimates
    (unbiased variance); eval mode uses the running estimates.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects (B, C), got {x.shape}")
    eps = state.eps
    if training:
        n = x.shape[0]
        if n < 2:
            raise DegenerateBatchError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var * (n / (n - 1))).astype(state.running_var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        y = xhat * gamma.data + beta.data

        def back(g):
            dxhat = g * gamma.data
            gx = inv / n * (n * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
            return gx, (g * xhat).sum(0), g.sum(0)

    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) * inv
        y = xhat * gamma.data + beta.data

        def back(g):
            return g * gamma.data * inv, (g * xhat).sum(0), g.sum(0)

    return _emit(y.astype(x.dtype), (x, gamma, beta), back)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p). Identity in eval mode."""
    if not 0 <= p < 1:
        raise ValueError("dropout probability must be in [0, 1)")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit RNG")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    target = np.asarray(target, dtype=np.int64)
    b, c = logits.shape
    if target.shape != (b,):
        raise ShapeError(f"targets {target.shape} do not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"target out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(b), target]).mean()

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(b), target] -= 1
        return (p * (g / b),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), back)
