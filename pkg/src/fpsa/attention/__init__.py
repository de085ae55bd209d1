"""Fixed-point self-attention: step function, solve, backward modes, baseline."""

from .fixed_point import MODES, FixedPointInfo, fixed_point
from .layer import (
    FpsaLayer,
    attention_maps,
    attention_step,
    forward,
    solve_state,
    value_static,
    vanilla_attention,
)
from .spectral import SpectralNorm, power_iteration, spectral_normalize

__all__ = [
    "MODES",
    "FixedPointInfo",
    "FpsaLayer",
    "SpectralNorm",
    "attention_maps",
    "attention_step",
    "fixed_point",
    "forward",
    "power_iteration",
    "solve_state",
    "spectral_normalize",
    "value_static",
    "vanilla_attention",
]
