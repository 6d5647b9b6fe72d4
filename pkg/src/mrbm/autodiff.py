"""A small reverse-mode tape over numpy arrays.

Only the operations the score network needs are provided. Gradients of
broadcast operands are summed back to the operand's shape.
"""

import numpy as np


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        other = _lift(other)

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)
        return Tensor(self.data + other.data, (self, other), back)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
        return Tensor(a * b, (self, other), back)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data

        def back(g):
            return g @ b.T, _unbroadcast(a.T @ g if a.ndim == 2 else np.outer(a, g), b.shape)
        return Tensor(a @ b, (self, other), back)

    def sin(self):
        a = self.data
        return Tensor(np.sin(a), (self,), lambda g: (g * np.cos(a),))

    def cos(self):
        a = self.data
        return Tensor(np.cos(a), (self,), lambda g: (-g * np.sin(a),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)
        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def backward(self):
        """Accumulate ``d self / d node`` into ``node.grad`` for every ancestor."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node.parents)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                parent.grad = g if parent.grad is None else parent.grad + g


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)
