"""Reverse-mode differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it requires a gradient,
remembers its parents and a closure that pushes the output gradient back to
them. The graph is implicit in those links; :func:`backward` recovers a
topological order by depth-first search from the loss.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import BadShapeError, NotScalarError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = ""

    # construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    def _accum(self, g):
        if not self.requires_grad:
            return
        g = unbroadcast(np.asarray(g), self.data.shape).astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # basic properties -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            a._accum(g)
            b._accum(g)

        return Tensor._make(a.data + b.data, (a, b), back, "add")

    __radd__ = __add__

    def __neg__(self):
        a = self

        def back(g):
            a._accum(-g)

        return Tensor._make(-a.data, (a,), back, "neg")

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            a._accum(g * b.data)
            b._accum(g * a.data)

        return Tensor._make(a.data * b.data, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def back(g):
            a._accum(g / b.data)
            b._accum(-g * a.data / (b.data * b.data))

        return Tensor._make(a.data / b.data, (a, b), back, "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a, p = self, float(exponent)

        def back(g):
            a._accum(g * p * a.data ** (p - 1.0))

        return Tensor._make(a.data ** p, (a,), back, f"pow{p:g}")

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.ndim == 0 or b.ndim == 0:
            raise BadShapeError("matmul needs at least 1-D operands")

        def back(g):
            ad = a.data[None, :] if a.ndim == 1 else a.data
            bd = b.data[:, None] if b.ndim == 1 else b.data
            g2 = g
            if a.ndim == 1 and b.ndim == 1:
                g2 = np.reshape(g, (1, 1))
            elif a.ndim == 1:
                g2 = np.expand_dims(g, -2)
            elif b.ndim == 1:
                g2 = np.expand_dims(g, -1)
            if a.requires_grad:
                ga = np.matmul(g2, np.swapaxes(bd, -1, -2))
                if a.ndim == 1:
                    ga = ga.reshape(-1, ga.shape[-1]).sum(axis=0) if ga.ndim > 2 else ga[0]
                a._accum(ga)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g2)
                if b.ndim == 1:
                    gb = gb[..., 0]
                    while gb.ndim > 1:
                        gb = gb.sum(axis=0)
                b._accum(gb)

        return Tensor._make(np.matmul(a.data, b.data), (a, b), back, "matmul")

    def __rmatmul__(self, other):
        return self._lift(other) @ self

    # reductions and shape ops ---------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def back(g):
            a._accum(np.reshape(g, a.shape))

        return Tensor._make(np.reshape(a.data, shape), (a,), back, "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        a = self

        def back(g):
            a._accum(np.transpose(g, inv))

        return Tensor._make(np.transpose(a.data, axes), (a,), back, "transpose")

    def swapaxes(self, i: int, j: int):
        axes = list(range(self.ndim))
        axes[i], axes[j] = axes[j], axes[i]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._make(a.data[idx], (a,), back, "index")

    # elementwise functions ------------------------------------------------
    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def back(g):
            a._accum(g * out_data)

        return Tensor._make(out_data, (a,), back, "exp")

    def log(self):
        a = self

        def back(g):
            a._accum(g / a.data)

        return Tensor._make(np.log(a.data), (a,), back, "log")

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def back(g):
            a._accum(g * 0.5 / out_data)

        return Tensor._make(out_data, (a,), back, "sqrt")

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def back(g):
            a._accum(g * out_data * (1.0 - out_data))

        return Tensor._make(out_data, (a,), back, "sigmoid")

    def relu(self):
        a = self
        mask = a.data > 0

        def back(g):
            a._accum(g * mask)

        return Tensor._make(a.data * mask, (a,), back, "relu")

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def back(g):
            a._accum(g * (1.0 - out_data * out_data))

        return Tensor._make(out_data, (a,), back, "tanh")

    def backward(self, inputs=None):
        backward(self, inputs=inputs)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` that take part in differentiation, parents first."""
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, inputs=None) -> None:
    """Populate ``.grad`` on every reachable tensor that requires one.

    ``inputs`` may list tensors that should end up with a gradient even when
    the loss does not depend on them; those receive zeros.
    """
    if loss.data.size != 1:
        raise NotScalarError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = topological_order(loss)
        loss._accum(np.ones_like(loss.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
    for t in inputs or ():
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.data)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def back(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            t._accum(part)

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accum(part)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)
