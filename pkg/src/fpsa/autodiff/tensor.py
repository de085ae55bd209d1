"""Dense tensors with a closure-based reverse-mode gradient graph.

Every differentiable operation produces a ``Tensor`` holding its parents and a
vector-Jacobian closure ``vjp(g) -> tuple of parent gradients``.  The closures
are pure functions of the saved forward values, so one recorded graph can be
back-propagated many times with different seeds (the adjoint solve relies on
this).
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import ConfigError, NumericalError, ShapeError

_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for tensors built from Python data."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    previous = default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextlib.contextmanager
def enable_grad():
    """Force graph recording inside the block (used by custom backward rules)."""
    previous = is_grad_enabled()
    _local.grad_enabled = True
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data
    return np.asarray(data, dtype=default_dtype())


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
        for i in items
    )


class Tensor:
    """A numpy array plus optional linkage into the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_vjp")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        if requires_grad and not np.issubdtype(self.data.dtype, np.floating):
            raise ConfigError("only floating tensors can require gradients")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    # ------------------------------------------------------------------
    # basic properties

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._vjp is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # ------------------------------------------------------------------
    # arithmetic

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self.shape, other.shape
        return _result(
            self.data + other.data,
            (self, other),
            lambda g: (unbroadcast(g, a), unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self.shape, other.shape
        return _result(
            self.data - other.data,
            (self, other),
            lambda g: (unbroadcast(g, a), unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data
        return _result(
            x * y,
            (self, other),
            lambda g: (unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data
        out = x / y
        return _result(
            out,
            (self, other),
            lambda g: (unbroadcast(g / y, x.shape), unbroadcast(-g * out / y, y.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    # ------------------------------------------------------------------
    # shape manipulation and reductions

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {src} into {shape}") from exc
        return _result(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeError(f"invalid permutation {axes} for shape {self.shape}")
        inverse = tuple(np.argsort(axes))
        return _result(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    @property
    def T(self):
        """Swap the last two axes."""
        if self.ndim < 2:
            return self
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        src_shape, dtype = self.shape, self.dtype
        basic = _is_basic_index(idx)

        def vjp(g):
            out = np.zeros(src_shape, dtype=dtype)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return _result(self.data[idx], (self,), vjp, "getitem")

    def sum(self, axis=None, keepdims=False):
        src = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _result(data, parents, vjp, op):
    """Wrap ``data`` as the output of ``op``, recording it when needed."""
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def matmul(a, b):
    """Batched matrix product with numpy broadcasting of leading dims."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc
    x, y = a.data, b.data

    def vjp(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), vjp, "matmul")


# ----------------------------------------------------------------------
# graph traversal


def _toposort(root):
    """Differentiable nodes reachable from ``root``, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _backprop(root, seed, wrt=None):
    """Propagate ``seed`` from ``root``; returns ``{id(node): gradient}``.

    With ``wrt`` given, only nodes lying on a path to one of those tensors are
    visited and only their gradients are kept.
    """
    order = _toposort(root)
    keep = None
    relevant = None
    if wrt is not None:
        keep = {id(t) for t in wrt}
        relevant = set()
        for node in order:
            if id(node) in keep or any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))
    grads = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        if relevant is not None and id(node) not in relevant:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if relevant is not None and id(parent) not in relevant:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        if keep is not None and id(node) not in keep:
            del grads[id(node)]
    return grads, order


def _finish(g, like):
    return np.array(g, dtype=like.dtype, copy=True).reshape(like.shape)


def backward(loss, params=None, retain_graph=False):
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a dict mapping each differentiable leaf (and every tensor in
    ``params``) to its gradient; ``.grad`` of those tensors is overwritten.
    Parameters not connected to ``loss`` get zeros.  The graph is released
    afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is None and not loss.requires_grad:
        raise ConfigError("loss is not connected to any differentiable tensor")
    result = {}
    order = []
    if loss.requires_grad:
        grads, order = _backprop(loss, np.ones(loss.shape, dtype=loss.dtype))
        for node in order:
            if node._vjp is None and id(node) in grads:
                result[node] = _finish(grads[id(node)], node.data)
    for p in params or ():
        if p not in result:
            result[p] = np.zeros_like(p.data)
    for t, g in result.items():
        t.grad = g
    if not retain_graph:
        for node in order:
            if node._vjp is not None:
                node._parents = ()
                node._vjp = None
    return result


def grad(output, inputs, grad_output=None):
    """Vector-Jacobian product of ``output`` against each tensor in ``inputs``.

    Does not touch ``.grad`` and keeps the graph, so it can be called
    repeatedly on the same recording.
    """
    if grad_output is None:
        if output.size != 1:
            raise ShapeError("grad_output is required for non-scalar outputs")
        grad_output = np.ones(output.shape, dtype=output.dtype)
    grad_output = np.asarray(grad_output, dtype=output.dtype)
    if grad_output.shape != output.shape:
        raise ShapeError(
            f"grad_output shape {grad_output.shape} does not match output {output.shape}"
        )
    if not output.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    grads, _ = _backprop(output, grad_output, wrt=inputs)
    return [
        _finish(grads[id(t)], t.data) if id(t) in grads else np.zeros_like(t.data)
        for t in inputs
    ]


def vjp(step, z, v):
    """Return ``v^T (d step / d z)`` evaluated at ``z``.

    ``step`` maps a Tensor to a Tensor; any tensors it closes over are held
    fixed.  The Jacobian is never materialised.
    """
    z_leaf = Tensor(np.array(_as_array(z), copy=True), requires_grad=True)
    out = step(z_leaf)
    v = np.asarray(v, dtype=out.dtype)
    if v.shape != out.shape:
        raise ShapeError(f"cotangent shape {v.shape} does not match step output {out.shape}")
    (g,) = grad(out, [z_leaf], v)
    return g
