"""Parameter containers: a bare-bones ``Module`` and ``Linear`` layer."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, default_dtype


class Module:
    """Collects parameters and buffers from instance attributes in definition order.

    Parameters are Tensors with ``requires_grad``; buffers are numpy arrays
    named in the class attribute ``_buffers`` (non-trainable state that still
    has to be checkpointed).
    """

    _buffers: tuple = ()

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return dict(self.named_parameters())

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_arrays(self):
        """Every parameter and buffer as a ``name -> ndarray`` mapping."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays):
        """Copy arrays into parameters/buffers in place; shapes must match."""
        for name, p in self.named_parameters():
            p.data[...] = arrays[name]
        for name, buf in self.named_buffers():
            buf[...] = arrays[name]

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())


def uniform_init(rng, fan_in, shape, dtype=None):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or default_dtype())


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as ``(in, out)``."""

    def __init__(self, d_in, d_out, rng, bias=True):
        self.weight = Tensor(uniform_init(rng, d_in, (d_in, d_out)), requires_grad=True)
        self.bias = (
            Tensor(uniform_init(rng, d_in, (d_out,)), requires_grad=True) if bias else None
        )

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y
