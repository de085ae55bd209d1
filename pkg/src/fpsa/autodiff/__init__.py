"""Minimal dense tensor library with reverse-mode automatic differentiation."""

from .gradcheck import numerical_gradient, relative_error
from .ops import (
    add,
    concat,
    cross_entropy_logits,
    gelu,
    layer_norm,
    mul,
    scale,
    slice_axis,
    softmax,
    softplus,
    sub,
    tanh,
    where,
)
from .optim import AdamWState, adamw_step, clip_grad_norm, global_norm
from .tensor import (
    Tensor,
    backward,
    default_dtype,
    enable_grad,
    grad,
    is_grad_enabled,
    matmul,
    no_grad,
    precision,
    unbroadcast,
    vjp,
)

__all__ = [
    "AdamWState",
    "Tensor",
    "adamw_step",
    "add",
    "backward",
    "clip_grad_norm",
    "concat",
    "cross_entropy_logits",
    "default_dtype",
    "enable_grad",
    "gelu",
    "global_norm",
    "grad",
    "is_grad_enabled",
    "layer_norm",
    "matmul",
    "mul",
    "no_grad",
    "numerical_gradient",
    "precision",
    "relative_error",
    "scale",
    "slice_axis",
    "softmax",
    "softplus",
    "sub",
    "tanh",
    "unbroadcast",
    "vjp",
    "where",
]
