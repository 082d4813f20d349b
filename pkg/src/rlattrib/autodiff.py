"""A small array-valued reverse-mode autodiff.

Each ``Tensor`` wraps a float64 ndarray and remembers how it was produced;
``backward()`` walks the graph in reverse topological order and accumulates
``.grad`` on every node (intermediate nodes included, which is what the
ghost dot products read).
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if parents:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self._parents = parents if requires_grad else ()
        self._backward = backward if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if id(p) not in seen)
        for node in order:
            node.grad = None
        self._accum(np.broadcast_to(grad, self.data.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other)

        def bw(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        return Tensor(self.data @ other.data, (self, other), bw)

    def square(self):
        return Tensor(self.data**2, (self,), lambda g: self._accum(2.0 * self.data * g))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, (self,), lambda g: self._accum(g * (1.0 - out**2)))

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, (self,), lambda g: self._accum(g * out))

    def sum(self, axis=None):
        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape))

        return Tensor(self.data.sum(axis=axis), (self,), bw)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def log_softmax(self):
        """Row-wise log-softmax over the last axis."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

        def bw(g):
            self._accum(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

        return Tensor(out, (self,), bw)

    def pick(self, index: np.ndarray):
        """``out[i] = self[i, index[i]]`` for a 2-D tensor."""
        index = np.asarray(index, dtype=np.intp)
        rows = np.arange(self.shape[0])

        def bw(g):
            full = np.zeros_like(self.data)
            full[rows, index] = g
            self._accum(full)

        return Tensor(self.data[rows, index], (self,), bw)

    def column(self, j: int = 0):
        def bw(g):
            full = np.zeros_like(self.data)
            full[:, j] = g
            self._accum(full)

        return Tensor(self.data[:, j], (self,), bw)

    def clip(self, lo: float, hi: float):
        inside = (self.data >= lo) & (self.data <= hi)
        return Tensor(np.clip(self.data, lo, hi), (self,), lambda g: self._accum(g * inside))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def bw(g):
        a._accum(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        b._accum(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return Tensor(np.where(take_a, a.data, b.data), (a, b), bw)
