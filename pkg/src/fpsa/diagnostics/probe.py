"""Empirical Lipschitz ratios of an update map, measured in the Frobenius norm."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, no_grad
from ..errors import DataError


@dataclass(frozen=True)
class ProbeStats:
    ratios: np.ndarray
    skipped: int

    @property
    def median(self):
        return float(np.median(self.ratios))

    @property
    def max(self):
        return float(self.ratios.max())

    @property
    def min(self):
        return float(self.ratios.min())

    @property
    def mean(self):
        return float(self.ratios.mean())

    @property
    def fraction_contractive(self):
        return float((self.ratios < 1.0).mean())


def _plain(step):
    def call(z):
        out = step(Tensor(z))
        return out.data if isinstance(out, Tensor) else np.asarray(out)

    return call


def layer_step(layer, x):
    """The attention update of ``layer`` for input ``x`` as a plain ``z -> z`` map."""
    from ..attention.layer import attention_step, value_static

    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    w = layer.qkv_weight()
    v = value_static(Tensor(x), w, layer.heads)
    tau = layer.temperatures()
    return lambda z: attention_step(z, v, w, tau, layer.heads, layer.use_tanh_step_norm)


def contraction_probe(step, z, n_pairs=64, seed=0, scale=1e-2):
    """Ratios ``|step(z1) - step(z2)| / |z1 - z2|`` for random pairs around ``z``.

    ``step`` is any map on arrays shaped like ``z`` (Tensors or ndarrays in,
    either out).  Each pair is ``z + scale * |z|_rms * noise`` with
    independent Gaussian noise.  Pairs at zero distance are skipped and
    counted in ``skipped``.
    """
    if n_pairs < 1:
        raise DataError(f"n_pairs must be positive, got {n_pairs}")
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    rng = np.random.default_rng(seed)
    rms = float(np.sqrt(np.mean(z * z))) or 1.0
    call = _plain(step)
    ratios = []
    skipped = 0
    with no_grad():
        for _ in range(n_pairs):
            z1 = z + scale * rms * rng.standard_normal(z.shape)
            z2 = z + scale * rms * rng.standard_normal(z.shape)
            dist = np.linalg.norm(z1 - z2)
            if dist == 0.0:
                skipped += 1
                continue
            out = np.linalg.norm(np.asarray(call(z1), dtype=np.float64) - call(z2))
            ratios.append(out / dist)
    if not ratios:
        raise DataError("every probe pair was degenerate")
    return ProbeStats(np.asarray(ratios), skipped)
