"""Gradient verification for the attention block.

Compares, per parameter, the implicit-mode gradient against the unrolled
one and the unrolled gradient against central finite differences, all in
float64 on a small random instance.  Phantom-mode errors are reported for
reference only.
"""

from __future__ import annotations

import time
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from unittest import mock

import numpy as np

from .attention import FpsaLayer, forward
from .attention import layer as layer_module
from .autodiff import Tensor, backward, no_grad, numerical_gradient, precision, tanh
from .autodiff.tensor import _result
from .solver import FpiConfig

IMPLICIT_TOLERANCE = 1e-3
FD_TOLERANCE = 1e-4
# Gradients are compared norm-wise per parameter tensor; this floor keeps
# parameters with a vanishing gradient (below ~1e-6 for an O(1) loss) from
# turning round-off into large relative errors.
GRADIENT_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    implicit_vs_unrolled: float
    unrolled_vs_fd: float
    phantom_vs_unrolled: float
    grad_norm: float


@dataclass
class GradcheckReport:
    rows: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    seconds: float = 0.0
    implicit_tolerance: float = IMPLICIT_TOLERANCE
    fd_tolerance: float = FD_TOLERANCE

    @property
    def max_implicit_error(self):
        return max(r.implicit_vs_unrolled for r in self.rows)

    @property
    def max_fd_error(self):
        return max(r.unrolled_vs_fd for r in self.rows)

    @property
    def passed(self):
        return self.max_implicit_error < self.implicit_tolerance and self.max_fd_error < self.fd_tolerance

    def lines(self):
        yield f"{'parameter':<16}{'|grad|':>11}{'impl/unroll':>13}{'unroll/fd':>12}{'phantom*':>11}"
        for r in self.rows:
            yield (
                f"{r.name:<16}{r.grad_norm:>11.3e}{r.implicit_vs_unrolled:>13.2e}"
                f"{r.unrolled_vs_fd:>12.2e}{r.phantom_vs_unrolled:>11.2e}"
            )
        yield (
            f"max: implicit/unrolled {self.max_implicit_error:.2e} (< {self.implicit_tolerance:g}), "
            f"unrolled/fd {self.max_fd_error:.2e} (< {self.fd_tolerance:g}); "
            f"* phantom is informational"
        )
        yield f"solver: max {self.iterations} iterations, all converged: {self.converged}; {self.seconds:.1f}s"
        yield "PASS" if self.passed else "FAIL"


def gradient_error(a, b, floor=GRADIENT_FLOOR):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def _corrupt_tanh(x):
    """``tanh`` whose backward rule is off by a factor of two."""
    y = tanh(x)
    return _result(y.data, (x,), lambda g: (g * 0.5 * (1.0 - y.data * y.data),), "tanh")


@contextmanager
def corrupted_vjp():
    """Swap in a wrong derivative for the step's tanh (negative control)."""
    with mock.patch.object(layer_module, "tanh", _corrupt_tanh):
        yield


def layer_gradcheck(
    seed=0,
    batch=2,
    tokens=4,
    dim=8,
    heads=2,
    epsilon=1e-8,
    max_iter=500,
    fd_step=1e-5,
    corrupt=False,
):
    """Run the three-way gradient comparison; returns a :class:`GradcheckReport`."""
    start = time.perf_counter()
    config = FpiConfig(max_iter=max_iter, epsilon=epsilon)
    with precision(np.float64), corrupted_vjp() if corrupt else nullcontext():
        rng = np.random.default_rng(seed)
        layer = FpsaLayer(dim, heads, rng)
        x = Tensor(rng.standard_normal((batch, tokens, dim)), requires_grad=True)
        weights = Tensor(rng.standard_normal((batch, tokens, dim)))
        params = {"input": x, **layer.parameters()}

        def loss(mode):
            y, trace = forward(x, layer, config, mode)
            return (y * weights).sum(), trace

        grads = {}
        for mode in ("unrolled", "implicit", "phantom"):
            value, trace = loss(mode)
            g = backward(value, list(params.values()))
            grads[mode] = {name: g[p] for name, p in params.items()}

        def scalar():
            with no_grad():
                return loss("unrolled")[0].item()

        report = GradcheckReport(
            iterations=int(trace.counts.max()), converged=bool(trace.converged.all())
        )
        for name, p in params.items():
            fd = numerical_gradient(scalar, p.data, fd_step)
            unrolled = grads["unrolled"][name]
            report.rows.append(
                ParamCheck(
                    name,
                    gradient_error(grads["implicit"][name], unrolled),
                    gradient_error(unrolled, fd),
                    gradient_error(grads["phantom"][name], unrolled),
                    float(np.linalg.norm(unrolled)),
                )
            )
    report.seconds = time.perf_counter() - start
    return report
