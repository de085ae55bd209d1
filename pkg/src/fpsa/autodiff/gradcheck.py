"""Central finite differences, used as an independent oracle for gradients."""

from __future__ import annotations

import numpy as np


def numerical_gradient(fn, array, h=1e-5):
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``array``.

    ``array`` is perturbed in place and restored after every probe.
    """
    out = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    view = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = float(fn())
        flat[i] = orig - h
        minus = float(fn())
        flat[i] = orig
        view[i] = (plus - minus) / (2 * h)
    return out


def relative_error(a, b, floor=1e-12):
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
