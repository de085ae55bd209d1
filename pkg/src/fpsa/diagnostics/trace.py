"""Per-(sample, head, token) convergence records and their summary statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError


def _to_sht(arr, batch, heads, tokens):
    """Reshape a per-chunk array from the solver into (sample, head, token)."""
    arr = np.asarray(arr)
    if arr.ndim == 3:  # (B, N, H)
        return arr.transpose(0, 2, 1)
    if arr.ndim == 2:  # per_token: (B, N)
        return np.repeat(arr[:, None, :], heads, axis=1)
    return np.broadcast_to(arr, (batch, heads, tokens)).copy()


@dataclass
class IterationTrace:
    counts: np.ndarray
    converged: np.ndarray
    final_residual: np.ndarray
    residual_sum: np.ndarray
    residual_count: np.ndarray
    max_iter: int
    epsilon: float
    retained_iterates: int = 0
    snapshots: list = field(default_factory=list)

    @property
    def num_samples(self):
        return self.counts.shape[0]

    @property
    def num_heads(self):
        return self.counts.shape[1]

    @property
    def num_tokens(self):
        return self.counts.shape[2]

    @property
    def mean_residual(self):
        """Mean relative residual of still-active chunks, shape (iteration, head)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.residual_count > 0, self.residual_sum / self.residual_count, np.nan)

    @classmethod
    def empty(cls, heads=1, max_iter=1, epsilon=1e-4):
        return cls(
            counts=np.zeros((0, heads, 0), dtype=np.int64),
            converged=np.zeros((0, heads, 0), dtype=bool),
            final_residual=np.zeros((0, heads, 0)),
            residual_sum=np.zeros((0, heads)),
            residual_count=np.zeros((0, heads), dtype=np.int64),
            max_iter=max_iter,
            epsilon=epsilon,
        )

    @classmethod
    def from_result(cls, result, shape, heads, config, retained_iterates=0):
        """Build a trace from an FpiResult of a ``(B, N, C)`` state."""
        batch, tokens = shape[0], shape[1]
        res = result.residuals
        if res.ndim == 4:
            per_head = res  # (K, B, N, H)
        elif res.ndim == 3:
            per_head = np.repeat(res[..., None], heads, axis=-1)
        else:
            per_head = np.broadcast_to(
                res.reshape(res.shape[0], 1, 1, 1), (res.shape[0], batch, tokens, heads)
            )
        active = ~np.isnan(per_head)
        return cls(
            counts=_to_sht(result.iterations, batch, heads, tokens).astype(np.int64),
            converged=_to_sht(result.converged, batch, heads, tokens).astype(bool),
            final_residual=_to_sht(result.final_residual, batch, heads, tokens).astype(np.float64),
            residual_sum=np.where(active, per_head, 0.0).sum(axis=(1, 2)),
            residual_count=active.sum(axis=(1, 2)),
            max_iter=config.max_iter,
            epsilon=config.epsilon,
            retained_iterates=retained_iterates,
            snapshots=list(result.snapshots),
        )

    @classmethod
    def concat(cls, traces):
        """Stack traces along the sample axis, in the order given."""
        traces = list(traces)
        if not traces:
            raise DataError("cannot concatenate an empty list of traces")
        depth = max(t.residual_sum.shape[0] for t in traces)
        heads = traces[0].num_heads

        def pad(a):
            extra = depth - a.shape[0]
            return np.concatenate([a, np.zeros((extra, heads), dtype=a.dtype)]) if extra else a

        return cls(
            counts=np.concatenate([t.counts for t in traces]),
            converged=np.concatenate([t.converged for t in traces]),
            final_residual=np.concatenate([t.final_residual for t in traces]),
            residual_sum=sum(pad(t.residual_sum) for t in traces),
            residual_count=sum(pad(t.residual_count) for t in traces),
            max_iter=traces[0].max_iter,
            epsilon=traces[0].epsilon,
            retained_iterates=max(t.retained_iterates for t in traces),
        )


@dataclass(frozen=True)
class HeadSummary:
    mean: float
    median: int
    max: int
    non_converged: int
    count: int


def lower_median(values):
    """Median that picks the lower middle element for even-length inputs."""
    ordered = np.sort(np.asarray(values).ravel())
    if ordered.size == 0:
        raise DataError("median of an empty sequence")
    return ordered[(ordered.size - 1) // 2]


def summarize_counts(counts, converged=None):
    counts = np.asarray(counts)
    if counts.size == 0:
        raise DataError("cannot summarise an empty trace")
    converged = np.ones(counts.shape, dtype=bool) if converged is None else np.asarray(converged)
    return HeadSummary(
        mean=float(counts.mean()),
        median=int(lower_median(counts)),
        max=int(counts.max()),
        non_converged=int((~converged).sum()),
        count=int(counts.size),
    )


def summarize(trace):
    """Per-head iteration statistics: mean, lower median, max, non-converged count."""
    if trace.counts.size == 0:
        raise DataError("cannot summarise an empty trace")
    return {
        h: summarize_counts(trace.counts[:, h, :], trace.converged[:, h, :])
        for h in range(trace.num_heads)
    }
