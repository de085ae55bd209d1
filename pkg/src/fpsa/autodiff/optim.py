"""AdamW and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


def global_norm(grads):
    """L2 norm over every gradient array, accumulated in insertion order."""
    total = 0.0
    for g in grads.values():
        g64 = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g64.ravel(), g64.ravel()))
    return float(np.sqrt(total))


def clip_grad_norm(grads, threshold):
    """Rescale all gradients jointly so their global L2 norm is at most ``threshold``.

    Gradients whose joint norm is already below the threshold are returned
    unchanged; otherwise every array is multiplied by ``threshold / norm``.
    """
    if not threshold > 0:
        raise ConfigError(f"clip threshold must be positive, got {threshold}")
    norm = global_norm(grads)
    if norm < threshold:
        return dict(grads)
    factor = threshold / norm
    return {k: (g * factor).astype(g.dtype, copy=False) for k, g in grads.items()}


@dataclass
class AdamWState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("AdamW needs lr >= 0, eps > 0 and weight_decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("AdamW betas must lie in [0, 1)")


def adamw_step(params, grads, state):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` and ``grads`` are dicts keyed by parameter name; parameter
    values are Tensors whose ``.data`` is overwritten in place so the
    objects themselves never change identity.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return params, state
