"""Reverse-mode automatic differentiation over numpy arrays.

Every vector-Jacobian product is written in terms of taped ``Tensor``
operations, so a backward pass run with ``create_graph=True`` is itself
recorded and can be differentiated again (double backprop).  This is what
lets the attack differentiate a gradient-matching loss with respect to the
inputs that produced the gradient.

Only the handful of operations needed by small MLPs are provided.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_recording: contextvars.ContextVar[bool] = contextvars.ContextVar("frlinv_recording", default=True)


@contextlib.contextmanager
def no_record():
    """Evaluate operations without building a tape."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


class Tensor:
    """A node of the tape: a float64 array plus how to pull back cotangents."""

    __slots__ = ("value", "requires_grad", "parents", "vjp")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def mT(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(x) -> Tensor:
    """A leaf that gradients are taken with respect to."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _node(value, parents: tuple, vjp) -> Tensor:
    if _recording.get() and any(p.requires_grad for p in parents):
        return Tensor(value, True, parents, vjp)
    return Tensor(value)


# --------------------------------------------------------------------------- shape ops


def sum_to(x, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    v = x.value
    lead = v.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and v.shape[lead + i] != 1
    )
    out = v.sum(axis=axes, keepdims=True)
    if lead:
        out = out.reshape(out.shape[lead:])
    out = out.reshape(shape)
    src = x.shape
    return _node(out, (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _node(np.broadcast_to(x.value, shape), (x,), lambda g: (sum_to(g, src),))


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (reshape(g, src),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _node(np.swapaxes(x.value, -1, -2), (x,), lambda g: (transpose(g),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def vjp(g):
        return (scatter(g, index, src),)

    return _node(x.value[index], (x,), vjp)


def scatter(x, index, shape: tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``x`` written at ``index`` (adjoint of indexing)."""
    x = as_tensor(x)
    out = np.zeros(shape)
    if _has_repeats(index):
        np.add.at(out, index, x.value)
    else:
        out[index] = x.value
    return _node(out, (x,), lambda g: (getitem(g, index),))


def _has_repeats(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    for part in parts:
        if isinstance(part, np.ndarray) and part.dtype != bool and part.size != np.unique(part).size:
            return True
    return False


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = (slice(None),) * ax + (slice(int(lo), int(hi)),)
            out.append(getitem(g, idx))
        return tuple(out)

    return _node(np.concatenate([x.value for x in xs], axis=ax), tuple(xs), vjp)


# --------------------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (
            sum_to(g, sa) if a.requires_grad else None,
            sum_to(g, sb) if b.requires_grad else None,
        )

    return _node(a.value + b.value, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (
            sum_to(g, sa) if a.requires_grad else None,
            sum_to(neg(g), sb) if b.requires_grad else None,
        )

    return _node(a.value - b.value, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (
            sum_to(mul(g, b), sa) if a.requires_grad else None,
            sum_to(mul(g, a), sb) if b.requires_grad else None,
        )

    return _node(a.value * b.value, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = _node(a.value / b.value, (a, b), None)

    def vjp(g):
        ga = sum_to(div(g, b), sa) if a.requires_grad else None
        gb = sum_to(neg(mul(g, div(out, b))), sb) if b.requires_grad else None
        return ga, gb

    out.vjp = vjp
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * a.value, (a,), lambda g: (mul(g, mul(a, 2.0)),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.sqrt(a.value), (a,), None)
    out.vjp = lambda g: (div(g, mul(out, 2.0)),)
    return out


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (
            sum_to(matmul(g, transpose(b)), sa) if a.requires_grad else None,
            sum_to(matmul(transpose(a), g), sb) if b.requires_grad else None,
        )

    return _node(np.matmul(a.value, b.value), (a, b), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)
    if axis is None or keepdims:
        kshape = (1,) * a.ndim if axis is None else out.shape
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        kshape = tuple(1 if i in axes else n for i, n in enumerate(src))
    return _node(out, (a,), lambda g: (broadcast_to(reshape(g, kshape), src),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = tsum(a, axis, keepdims)
    count = a.value.size // max(total.value.size, 1) if axis is not None else a.value.size
    return mul(total, 1.0 / count)


# --------------------------------------------------------------------------- nonlinearities


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.tanh(a.value), (a,), None)
    out.vjp = lambda g: (mul(g, sub(1.0, square(out))),)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.value > 0).astype(np.float64)
    return _node(a.value * mask, (a,), lambda g: (mul(g, mask),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _node(np.exp(a.value), (a,), None)
    out.vjp = lambda g: (mul(g, out),)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = a.value.max(axis=axis, keepdims=True)
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def select_max(a, axis: int = -1) -> Tensor:
    """Max along ``axis`` with gradient routed through the argmax only.

    Ties go to the lowest index (numpy argmax semantics).
    """
    a = as_tensor(a)
    idx = np.argmax(a.value, axis=axis)
    mask = np.zeros_like(a.value)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    return tsum(mul(a, mask), axis=axis)


# --------------------------------------------------------------------------- driver


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    With ``create_graph`` the returned tensors stay on the tape and can be
    differentiated again.  Unreached inputs get zero gradients.
    """
    inputs = list(inputs)
    if output.value.size != 1:
        raise ValueError("grad requires a scalar output")
    ctx = contextlib.nullcontext() if create_graph else no_record()
    with ctx:
        cot: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.value))}
        if output.requires_grad:
            for node in reversed(_topo_order(output)):
                g = cot.get(id(node))
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = cot.get(id(parent))
                    cot[id(parent)] = pg if prev is None else add(prev, pg)
        result = []
        for x in inputs:
            g = cot.get(id(x))
            result.append(g if g is not None else Tensor(np.zeros_like(x.value)))
    return result


def value_and_grad(fn: Callable[..., Tensor], *arrays):
    """Evaluate ``fn`` on fresh leaves built from ``arrays``; return value and numpy grads."""
    leaves = [variable(a) for a in arrays]
    out = fn(*leaves)
    grads = grad(out, leaves)
    return float(out.value), [g.value for g in grads]
