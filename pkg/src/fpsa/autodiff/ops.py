"""Differentiable functions built on :class:`Tensor`."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, _result, matmul, unbroadcast

__all__ = [
    "add",
    "concat",
    "cross_entropy_logits",
    "gelu",
    "layer_norm",
    "matmul",
    "mul",
    "scale",
    "slice_axis",
    "softmax",
    "softplus",
    "sub",
    "tanh",
    "where",
]

_GELU_C = np.sqrt(2.0 / np.pi)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def add(a, b):
    return _t(a) + b


def sub(a, b):
    return _t(a) - b


def mul(a, b):
    return _t(a) * b


def scale(x, factor):
    """Multiply by a Python scalar."""
    return _t(x) * float(factor)


def tanh(x):
    x = _t(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def gelu(x):
    """GELU, tanh approximation."""
    x = _t(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _result(y, (x,), vjp, "gelu")


def softplus(x):
    x = _t(x)
    v = x.data
    y = np.logaddexp(0.0, v).astype(v.dtype, copy=False)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _result(y, (x,), lambda g: (g * sig,), "softplus")


def softmax(x, axis=-1):
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = _t(x)
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), vjp, "softmax")


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalise the last axis to zero mean and unit variance, then scale/shift."""
    if not eps > 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _t(x), _t(gain), _t(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}"
        )
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    y = xhat * gain.data + bias.data
    lead = tuple(range(v.ndim - 1))

    def vjp(g):
        gx = g * gain.data
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(y, (x, gain, bias), vjp, "layer_norm")


def concat(tensors, axis=0):
    tensors = [_t(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = _check_axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat shape mismatch on axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp, "concat"
    )


def slice_axis(x, axis, start, stop):
    """``x`` restricted to ``[start, stop)`` along ``axis``."""
    x = _t(x)
    axis = _check_axis(x, axis)
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}, {stop}) out of range for axis of size {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return x[tuple(index)]


def where(mask, a, b):
    """Elementwise select: ``a`` where ``mask`` is true, else ``b``.

    ``mask`` is a plain boolean array; it is not differentiated.
    """
    a, b = _t(a), _t(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def vjp(g):
        zero = np.zeros((), dtype=g.dtype)
        return (
            unbroadcast(np.where(mask, g, zero), a.shape),
            unbroadcast(np.where(mask, zero, g), b.shape),
        )

    return _result(out, (a, b), vjp, "where")


def cross_entropy_logits(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    logits = _t(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be batch x classes, got {logits.shape}")
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets must have shape ({n},), got {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise DataError("targets must be integer class indices")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise DataError(f"target index out of range [0, {k})")
    v = logits.data
    shifted = v - v.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def vjp(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=v.dtype), (logits,), vjp, "cross_entropy")
