"""A differentiable fixed-point node with three backward strategies.

``fixed_point(step, z0, inputs, config, mode)`` solves ``z = step(z, *inputs)``
and returns the equilibrium as a Tensor whose gradient rule depends on
``mode``:

``unrolled``
    every iteration (including the freezing selects) is recorded in the
    graph and differentiated exactly.  Memory grows with the iteration count.
``implicit``
    only the equilibrium is kept.  The backward pass solves the adjoint
    equation ``a = g + a^T J`` (``J = d step / d z`` at the equilibrium) with
    the same solver, tolerance and freezing as the forward pass, zeroes the
    adjoint of chunks whose forward solve did not converge, and then takes a
    single vector-Jacobian product of ``step`` against the inputs.
``phantom``
    back-propagates through the final step only, holding its input state
    constant; no adjoint solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, enable_grad, grad, is_grad_enabled, no_grad
from ..autodiff.tensor import _result
from ..errors import ConfigError
from ..solver import expand_mask, solve

MODES = ("unrolled", "implicit", "phantom")


@dataclass
class FixedPointInfo:
    result: object
    mode: str
    retained_iterates: int
    adjoint: np.ndarray = None
    adjoint_result: object = None


def _check_mode(mode):
    if mode not in MODES:
        raise ConfigError(f"backward mode must be one of {MODES}, got {mode!r}")


def fixed_point(step, z0, inputs, config, mode="implicit", heads=1, record_iterates=False):
    """Solve for the fixed point of ``step(z, *inputs)`` starting at ``z0``.

    Returns ``(z_star, info)``.  ``info.retained_iterates`` counts the state
    tensors kept alive for the backward pass.
    """
    _check_mode(mode)
    inputs = tuple(inputs)

    if mode == "unrolled":
        z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
        result = solve(
            lambda z: step(z, *inputs), z0, config, heads, record_iterates=record_iterates
        )
        z_star = result.state
        if not isinstance(z_star, Tensor):
            z_star = Tensor(z_star)
        retained = result.iterations_run + 1 if is_grad_enabled() else 1
        return z_star, FixedPointInfo(result, mode, retained)

    constants = tuple(Tensor(t.data) for t in inputs)
    start = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    with no_grad():
        result = solve(
            lambda z: step(Tensor(z), *constants).data,
            start,
            config,
            heads,
            record_iterates=record_iterates,
        )
    z_star = result.state
    if mode == "implicit":
        result.previous_state = None
        info = FixedPointInfo(result, mode, retained_iterates=1)
        vjp = _implicit_vjp(step, z_star, inputs, config, heads, result.converged, info)
    else:
        info = FixedPointInfo(result, mode, retained_iterates=2)
        vjp = _phantom_vjp(step, result.previous_state, inputs)
    return _result(np.array(z_star, copy=True), inputs, vjp, f"fixed_point_{mode}"), info


def _record_step(step, z, inputs, z_requires_grad):
    z_leaf = Tensor(z, requires_grad=z_requires_grad)
    leaves = tuple(Tensor(t.data, requires_grad=t.requires_grad) for t in inputs)
    with enable_grad():
        out = step(z_leaf, *leaves)
    return z_leaf, leaves, out


def _input_grads(out, leaves, seed):
    wanted = [leaf for leaf in leaves if leaf.requires_grad]
    grads = iter(grad(out, wanted, seed)) if wanted else iter(())
    return tuple(next(grads) if leaf.requires_grad else None for leaf in leaves)


def _implicit_vjp(step, z_star, inputs, config, heads, converged, info):
    def vjp(g):
        z_leaf, leaves, out = _record_step(step, z_star, inputs, True)

        def adjoint_step(a):
            (ja,) = grad(out, [z_leaf], a)
            return g + ja

        adj = solve(adjoint_step, g, config, heads)
        a = adj.state
        if not converged.all():
            discard = expand_mask(~converged, a.shape, config.granularity, heads)
            a = np.where(discard, np.zeros((), dtype=a.dtype), a)
        info.adjoint = a
        info.adjoint_result = adj
        return _input_grads(out, leaves, a)

    return vjp


def _phantom_vjp(step, z_prev, inputs):
    def vjp(g):
        _, leaves, out = _record_step(step, z_prev, inputs, False)
        return _input_grads(out, leaves, g)

    return vjp
