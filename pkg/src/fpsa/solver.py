"""Fixed-point iteration with per-chunk convergence freezing.

A state tensor is split into chunks according to a granularity:

* ``whole`` - the entire tensor is one chunk;
* ``per_token`` - a ``(..., N, C)`` state has one chunk per token row;
* ``per_token_per_head`` - each token row is further cut into ``heads``
  contiguous channel slices of width ``C // heads``.

Each chunk stops being updated once its relative Frobenius residual drops
below ``epsilon``.  The same driver serves the forward solve (numpy arrays or
recorded Tensors) and the adjoint solve of the implicit backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, where
from .errors import ConfigError, NumericalError, ShapeError

GRANULARITIES = ("whole", "per_token", "per_token_per_head")
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class FpiConfig:
    max_iter: int = 100
    epsilon: float = 1e-4
    granularity: str = "per_token_per_head"

    def __post_init__(self):
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError(f"max_iter must be a positive integer, got {self.max_iter}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(
                f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}"
            )


@dataclass
class FpiResult:
    """Outcome of :func:`solve`.

    ``residuals`` and ``step_norms`` have shape ``(iterations_run, *chunks)``;
    entries for chunks that were already frozen before an iteration are NaN.
    ``step_norms`` holds the absolute ``||z_next - z||`` per chunk, the
    quantity whose ratio exposes the contraction factor.
    """

    state: object
    iterations: np.ndarray
    converged: np.ndarray
    residuals: np.ndarray
    step_norms: np.ndarray
    final_residual: np.ndarray
    frozen_history: np.ndarray
    previous_state: object = None
    snapshots: list = field(default_factory=list)

    @property
    def iterations_run(self) -> int:
        return int(self.residuals.shape[0])


def _data(z):
    return z.data if isinstance(z, Tensor) else np.asarray(z)


def _check_layout(shape, granularity, heads):
    if granularity == "whole":
        return
    if len(shape) < 2:
        raise ShapeError(f"{granularity} chunking needs a (..., N, C) state, got {shape}")
    if granularity == "per_token_per_head" and shape[-1] % heads:
        raise ShapeError(f"channel extent {shape[-1]} is not divisible by {heads} heads")


def chunk_norms(x, granularity, heads=1):
    """Frobenius norm of every chunk of ``x`` (computed in float64)."""
    x = np.asarray(x, dtype=np.float64)
    _check_layout(x.shape, granularity, heads)
    if granularity == "whole":
        return np.sqrt(np.sum(x * x))
    if granularity == "per_token":
        return np.sqrt(np.sum(x * x, axis=-1))
    split = x.reshape(x.shape[:-1] + (heads, x.shape[-1] // heads))
    return np.sqrt(np.sum(split * split, axis=-1))


def chunk_shape(shape, granularity, heads=1):
    _check_layout(shape, granularity, heads)
    if granularity == "whole":
        return ()
    if granularity == "per_token":
        return tuple(shape[:-1])
    return tuple(shape[:-1]) + (heads,)


def expand_mask(mask, shape, granularity, heads=1):
    """Broadcast a per-chunk boolean mask to the element layout ``shape``."""
    mask = np.asarray(mask, dtype=bool)
    if granularity == "whole":
        return np.broadcast_to(mask, shape)
    if granularity == "per_token":
        return np.broadcast_to(mask[..., None], shape)
    return np.repeat(mask, shape[-1] // heads, axis=-1)


def residual(z_next, z, granularity="whole", heads=1):
    """Per-chunk relative change ``||z_next - z||_F / ||z||_F``.

    Chunks whose reference norm is below ``1e-12`` report the absolute
    change instead.
    """
    zn, zd = _data(z_next), _data(z)
    if zn.shape != zd.shape:
        raise ShapeError(f"residual operands differ in shape: {zn.shape} vs {zd.shape}")
    diff = chunk_norms(zn.astype(np.float64) - zd, granularity, heads)
    base = chunk_norms(zd, granularity, heads)
    safe = base >= NORM_FLOOR
    return np.where(safe, diff / np.where(safe, base, 1.0), diff)


def selective_update(z, z_next, frozen, granularity="whole", heads=1):
    """Take frozen chunks from ``z`` and every other chunk from ``z_next``.

    Works on plain arrays and on Tensors (where it records a differentiable
    select, so frozen chunks receive gradient only through ``z``).
    """
    frozen = np.asarray(frozen, dtype=bool)
    if not frozen.any():
        return z_next
    shape = _data(z).shape
    mask = expand_mask(frozen, shape, granularity, heads)
    if isinstance(z, Tensor) or isinstance(z_next, Tensor):
        return where(mask, z, z_next)
    if frozen.all():
        return z
    return np.where(mask, z, z_next)


def solve(step, z0, config, heads=1, record_iterates=False):
    """Iterate ``z <- step(z)`` until every chunk has converged or ``max_iter``.

    A chunk converges at iteration ``k`` when the update produced at ``k`` has
    residual below ``epsilon``; that update is kept and the chunk is then
    frozen for the rest of the solve.  ``iterations`` counts the last
    iteration in which each chunk was still active, so an input that is
    already a fixed point reports 1.
    """
    zd0 = _data(z0)
    shape = chunk_shape(zd0.shape, config.granularity, heads)
    frozen = np.zeros(shape, dtype=bool)
    iterations = np.zeros(shape, dtype=np.int64)
    final = np.full(shape, np.nan)
    residuals, steps, frozen_hist = [], [], []
    snapshots = [np.array(zd0, copy=True)] if record_iterates else []

    z, previous = z0, None
    for k in range(1, config.max_iter + 1):
        try:
            z_next = step(z)
        except NumericalError as exc:
            partial = np.array(residuals) if residuals else None
            raise NumericalError(
                f"fixed-point step diverged at iteration {k}: {exc}", iteration=k, trace=partial
            ) from exc
        zn, zd = _data(z_next), _data(z)
        if zn.shape != zd.shape:
            raise ShapeError(f"step changed the state shape from {zd.shape} to {zn.shape}")
        if not np.isfinite(zn).all():
            partial = np.array(residuals) if residuals else None
            raise NumericalError(
                f"fixed-point step produced non-finite values at iteration {k}",
                iteration=k,
                trace=partial,
            )
        diff = chunk_norms(zn.astype(np.float64) - zd, config.granularity, heads)
        base = chunk_norms(zd, config.granularity, heads)
        safe = base >= NORM_FLOOR
        rel = np.where(safe, diff / np.where(safe, base, 1.0), diff)

        active = ~frozen
        residuals.append(np.where(active, rel, np.nan))
        steps.append(np.where(active, diff, np.nan))
        final = np.where(active, rel, final)
        iterations = np.where(active, k, iterations)

        previous = z
        z = selective_update(z, z_next, frozen, config.granularity, heads)
        frozen = frozen | (active & (rel < config.epsilon))
        frozen_hist.append(frozen.copy())
        if record_iterates:
            snapshots.append(np.array(_data(z), copy=True))
        if frozen.all():
            break

    return FpiResult(
        state=z,
        iterations=iterations,
        converged=frozen,
        residuals=np.array(residuals),
        step_norms=np.array(steps),
        final_residual=final,
        frozen_history=np.array(frozen_hist),
        previous_state=previous,
        snapshots=snapshots,
    )
