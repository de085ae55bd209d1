"""Fixed-point self-attention block and its single-pass baseline."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, gelu, layer_norm, no_grad, softmax, softplus, tanh
from ..autodiff.tensor import default_dtype
from ..diagnostics.trace import IterationTrace
from ..errors import ConfigError, NumericalError, ShapeError
from ..nn import Linear, Module, uniform_init
from ..solver import FpiConfig
from .fixed_point import fixed_point
from .spectral import SpectralNorm

TAU_INIT = float(np.log(np.expm1(1.0)))  # softplus(TAU_INIT) == 1


class FpsaLayer(Module):
    """Parameters of one attention block.

    ``qkv`` is the fused ``C -> 3C`` projection (columns ``[0, C)`` are
    queries, ``[C, 2C)`` keys, ``[2C, 3C)`` values, each split into ``heads``
    contiguous slices).  Temperatures are ``softplus(rho)`` so they stay
    positive.  The same bundle drives the vanilla baseline, which simply
    skips spectral normalisation and the tanh step norm.
    """

    def __init__(
        self, dim, heads, rng, use_tanh_step_norm=True, spectral=True, ln_eps=1e-6, spectral_rng=None
    ):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.use_tanh_step_norm = use_tanh_step_norm
        self.ln_eps = ln_eps
        self.qkv = Tensor(uniform_init(rng, dim, (dim, 3 * dim)), requires_grad=True)
        self.rho = Tensor(np.full(heads, TAU_INIT, dtype=default_dtype()), requires_grad=True)
        self.out = Linear(dim, dim, rng)
        self.ffn_in = Linear(dim, 4 * dim, rng)
        self.ffn_out = Linear(4 * dim, dim, rng)
        self.ln_gain = Tensor(np.ones(dim, dtype=default_dtype()), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(dim, dtype=default_dtype()), requires_grad=True)
        # A separate generator for the power-iteration vector keeps the weight
        # draws identical between the spectral and plain variants.
        self.spectral = SpectralNorm(self.qkv.data, spectral_rng or rng) if spectral else None

    def qkv_weight(self):
        return self.spectral(self.qkv) if self.spectral is not None else self.qkv

    def temperatures(self):
        return softplus(self.rho)

    def update_spectral(self):
        """Advance the power-iteration estimate by one step (once per optimiser step)."""
        if self.spectral is not None:
            self.spectral.step(self.qkv.data)

    def post(self, z):
        """``LayerNorm(FFN(A) + A)`` with ``A = out(z)``."""
        a = self.out(z)
        return layer_norm(self.ffn_out(gelu(self.ffn_in(a))) + a, self.ln_gain, self.ln_bias, self.ln_eps)


def _split_heads(x, heads):
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def value_static(x, w_qkv, heads):
    """Value heads of ``x``: the V slice of the fused projection, ``(B, H, N, D)``."""
    c = x.shape[-1]
    return _split_heads(x @ w_qkv[:, 2 * c :], heads)


def attention_step(z, v_static, w_qkv, tau, heads, use_tanh=True, on_probs=None):
    """One refinement of the state ``z`` (B, N, C).

    Queries and keys come from ``z``; values are the fixed ``v_static``.
    Scores of head ``h`` are scaled by ``head_dim ** -0.5 / tau[h]``.
    ``on_probs`` receives the (B, H, N, N) attention probabilities.
    """
    if z.ndim != 3:
        raise ShapeError(f"state must be (B, N, C), got {z.shape}")
    b, n, c = z.shape
    if c % heads or w_qkv.shape != (c, 3 * c) or tau.shape != (heads,):
        raise ShapeError(
            f"inconsistent attention shapes: state {z.shape}, qkv {w_qkv.shape}, tau {tau.shape}"
        )
    if v_static.shape != (b, heads, n, c // heads):
        raise ShapeError(f"v_static must be {(b, heads, n, c // heads)}, got {v_static.shape}")
    qk = z @ w_qkv[:, : 2 * c]
    q = _split_heads(qk[..., :c], heads)
    k = _split_heads(qk[..., c:], heads)
    factor = (c // heads) ** -0.5 / tau.reshape(heads, 1, 1)
    try:
        scores = (q @ k.T) * factor
    except NumericalError:
        with np.errstate(all="ignore"):
            raw = (q.data @ np.swapaxes(k.data, -1, -2)) * factor.data
        bad = [h for h in range(heads) if not np.isfinite(raw[:, h]).all()]
        raise NumericalError(f"non-finite attention scores in head(s) {bad}") from None
    probs = softmax(scores, axis=-1)
    if on_probs is not None:
        on_probs(probs.data)
    out = (probs @ v_static).transpose(0, 2, 1, 3).reshape(b, n, c)
    return tanh(out) if use_tanh else out


def _as_input(x, layer):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[-1] != layer.dim:
        raise ShapeError(f"input must be (B, N, {layer.dim}), got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericalError("attention input contains non-finite values")
    return x


def solve_state(x, layer, config, mode="implicit", record_iterates=False, on_probs=None):
    """Run the fixed-point loop only; returns ``(z_star, info)``."""
    x = _as_input(x, layer)
    w = layer.qkv_weight()
    tau = layer.temperatures()
    v = value_static(x, w, layer.heads)
    hook = [on_probs]

    def step(z, v_static, w_qkv, t):
        return attention_step(z, v_static, w_qkv, t, layer.heads, layer.use_tanh_step_norm, hook[0])

    z_star, info = fixed_point(
        step, x, (v, w, tau), config, mode, layer.heads, record_iterates=record_iterates
    )
    hook[0] = None
    return z_star, info


def forward(x, layer, config=None, mode="implicit", record_iterates=False, on_probs=None):
    """FPSA block: solve for the equilibrium state, then the post block.

    Returns ``(y, trace)`` where ``trace`` is an :class:`IterationTrace`.
    """
    config = config or FpiConfig()
    z_star, info = solve_state(x, layer, config, mode, record_iterates, on_probs)
    trace = IterationTrace.from_result(
        info.result, z_star.shape, layer.heads, config, info.retained_iterates
    )
    return layer.post(z_star), trace


def vanilla_attention(x, layer, on_probs=None):
    """Single-pass multi-head attention with the same parameters and post block."""
    x = _as_input(x, layer)
    w = layer.qkv_weight()
    v = value_static(x, w, layer.heads)
    z = attention_step(x, v, w, layer.temperatures(), layer.heads, use_tanh=False, on_probs=on_probs)
    return layer.post(z)


def attention_maps(x, layer, config=None, fixed_point_layer=True):
    """Attention probabilities (B, H, N, N) of the final refinement step."""
    captured = []
    with no_grad():
        if not fixed_point_layer:
            vanilla_attention(x, layer, on_probs=captured.append)
            return captured[-1]
        z_star, _ = solve_state(x, layer, config or FpiConfig())
        w = layer.qkv_weight()
        v = value_static(_as_input(x, layer), w, layer.heads)
        attention_step(
            z_star, v, w, layer.temperatures(), layer.heads, layer.use_tanh_step_norm, captured.append
        )
    return captured[-1]
