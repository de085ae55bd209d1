"""Shrink-only spectral normalisation driven by persistent power iteration."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor
from ..errors import ShapeError
from ..nn import Module

_TINY = 1e-12


def _unit(x):
    n = np.linalg.norm(x)
    return x / n if n > _TINY else x


def power_iteration(w, u, n_iter=1):
    """Run ``n_iter`` power-iteration updates; returns ``(u, v, sigma)``.

    ``u`` lives in the row space and ``v`` in the column space of ``w``, and
    ``sigma = u^T w v`` estimates the largest singular value.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"spectral normalisation needs a 2-D matrix, got {w.shape}")
    u = np.asarray(u, dtype=np.float64)
    v = np.zeros(w.shape[1])
    for _ in range(n_iter):
        v_new = w.T @ u
        if np.linalg.norm(v_new) <= _TINY:
            return u, v, 0.0
        v = _unit(v_new)
        u_new = w @ v
        if np.linalg.norm(u_new) <= _TINY:
            return u, v, 0.0
        u = _unit(u_new)
    return u, v, float(u @ w @ v)


def spectral_normalize(w, u_state):
    """One power-iteration update, then divide ``w`` by ``max(sigma, 1)``.

    Returns ``(w_normalized, new_u_state)``.  A zero matrix comes back
    unchanged.  ``w`` may be an ndarray or a Tensor (the division is then
    differentiable, with the power-iteration vectors held constant).
    """
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    u, v, _ = power_iteration(data, u_state, 1)
    return _divide(w, u, v), u


def _divide(w, u, v):
    if isinstance(w, Tensor):
        uu = Tensor(u[None, :].astype(w.dtype))
        vv = Tensor(v[:, None].astype(w.dtype))
        sigma = (uu @ w @ vv).reshape(())
        return w / sigma if sigma.data > 1.0 else w
    sigma = float(u @ np.asarray(w, dtype=np.float64) @ v)
    return w / sigma if sigma > 1.0 else w


class SpectralNorm(Module):
    """Power-iteration state for one weight matrix.

    ``step`` advances the estimate (once per optimiser step during training);
    ``__call__`` divides the weight by the current estimate without touching
    the state, so repeated forward passes see the same normalisation.
    """

    _buffers = ("u", "v")

    def __init__(self, weight, rng, warmup=10):
        weight = np.asarray(weight)
        self.u = _unit(rng.standard_normal(weight.shape[0]))
        self.v = np.zeros(weight.shape[1])
        self.step(weight, warmup)

    def step(self, w, n_iter=1):
        u, v, sigma = power_iteration(w, self.u, n_iter)
        self.u[...] = u
        self.v[...] = v
        return sigma

    def sigma(self, w):
        return float(self.u @ np.asarray(w, dtype=np.float64) @ self.v)

    def __call__(self, w):
        return _divide(w, self.u, self.v)
