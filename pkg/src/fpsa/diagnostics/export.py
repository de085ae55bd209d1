"""CSV exports of attention maps and per-chunk iteration counts."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import DataError

ROW_SUM_TOLERANCE = 1e-6
TRACE_COLUMNS = ("sample_id", "head", "token", "iterations", "converged", "final_residual")


def _writer(handle):
    return csv.writer(handle, lineterminator="\n")


def attention_csv_paths(path, heads):
    path = Path(path)
    return [path.with_name(f"{path.stem}_head{h}{path.suffix or '.csv'}") for h in range(heads)]


def export_attention_csv(probs, path, labels=None):
    """Write one ``N x N`` CSV per head; returns the written paths.

    ``probs`` is ``(H, N, N)`` (or a single ``(N, N)`` map).  Files are named
    ``<stem>_head<h>.csv`` next to ``path``.  The header row holds the key
    labels and the first column the query labels.  Rows that are not
    probability distributions (sum off by more than 1e-6, or negative
    entries) are refused.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 2:
        probs = probs[None]
    if probs.ndim != 3 or probs.shape[1] != probs.shape[2]:
        raise DataError(f"attention maps must be (H, N, N), got {probs.shape}")
    heads, n, _ = probs.shape
    sums = probs.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
    if bad.size:
        h, q = bad[0]
        raise DataError(f"head {h} query {q}: row sums to {sums[h, q]!r}, refusing to export")
    if (probs < 0).any() or not np.isfinite(probs).all():
        raise DataError("attention maps contain negative or non-finite entries")
    labels = [str(i) for i in range(n)] if labels is None else [str(x) for x in labels]
    if len(labels) != n:
        raise DataError(f"expected {n} token labels, got {len(labels)}")

    paths = attention_csv_paths(path, heads)
    paths[0].parent.mkdir(parents=True, exist_ok=True)
    for h, target in enumerate(paths):
        with open(target, "w", encoding="utf-8", newline="") as f:
            w = _writer(f)
            w.writerow(["query", *labels])
            for q in range(n):
                w.writerow([labels[q], *(f"{x:.9f}" for x in probs[h, q])])
    return paths


def read_attention_csv(path):
    """Parse a file written by :func:`export_attention_csv`; returns ``(matrix, labels)``."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path}: empty attention CSV")
    labels = rows[0][1:]
    return np.array([[float(x) for x in r[1:]] for r in rows[1:]]).reshape(-1, len(labels)), labels


def export_trace_csv(trace, path):
    """One row per (sample, head, token) in that nesting order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = _writer(f)
        w.writerow(TRACE_COLUMNS)
        s, h, n = trace.counts.shape
        for i in range(s):
            for j in range(h):
                for k in range(n):
                    w.writerow(
                        [
                            i,
                            j,
                            k,
                            int(trace.counts[i, j, k]),
                            int(bool(trace.converged[i, j, k])),
                            f"{float(trace.final_residual[i, j, k]):.9e}",
                        ]
                    )
    return path


def read_trace_csv(path):
    """Rows of a trace CSV as a list of dicts with typed values."""
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
            raise DataError(f"{path}: unexpected trace CSV header {reader.fieldnames}")
        return [
            {
                "sample_id": int(r["sample_id"]),
                "head": int(r["head"]),
                "token": int(r["token"]),
                "iterations": int(r["iterations"]),
                "converged": r["converged"] == "1",
                "final_residual": float(r["final_residual"]),
            }
            for r in reader
        ]
