"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Var` wraps an array value and records how it was produced. Calling
:meth:`Var.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``grad`` on every node.

Only the handful of operations needed to write PDE residuals and losses are
provided (arithmetic, integer powers, indexing, reductions). Network
evaluations enter the graph as leaf nodes whose accumulated gradient is
consumed by the network's own backward pass (see :mod:`pinnshift.neural`).
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    grad = np.asarray(grad)
    if grad.shape == tuple(shape):
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Array-valued node of a reverse-mode computation graph."""

    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops
    __slots__ = ("value", "grad", "_parents")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        # each parent is (Var, vjp) with vjp mapping this node's grad to the parent's
        self._parents = parents

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Var):
            return Var(self.value + other.value,
                       ((self, lambda g: _unbroadcast(g, self.shape)),
                        (other, lambda g: _unbroadcast(g, other.shape))))
        return Var(self.value + other, ((self, lambda g: _unbroadcast(g, self.shape)),))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            return Var(a * b,
                       ((self, lambda g: _unbroadcast(g * b, self.shape)),
                        (other, lambda g: _unbroadcast(g * a, other.shape))))
        c = np.asarray(other, dtype=np.float64)
        return Var(self.value * c, ((self, lambda g: _unbroadcast(g * c, self.shape)),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            a, b = self.value, other.value
            return Var(a / b,
                       ((self, lambda g: _unbroadcast(g / b, self.shape)),
                        (other, lambda g: _unbroadcast(-g * a / (b * b), other.shape))))
        c = np.asarray(other, dtype=np.float64)
        return Var(self.value / c, ((self, lambda g: _unbroadcast(g / c, self.shape)),))

    def __rtruediv__(self, other):
        b = self.value
        c = np.asarray(other, dtype=np.float64)
        return Var(c / b, ((self, lambda g: _unbroadcast(-g * c / (b * b), self.shape)),))

    def __pow__(self, n):
        if isinstance(n, Var):
            raise TypeError("only constant exponents are supported")
        a = self.value
        if n == 2:
            return Var(a * a, ((self, lambda g: g * 2.0 * a),))
        if n == 3:
            return Var(a * a * a, ((self, lambda g: g * 3.0 * a * a),))
        return Var(a ** n, ((self, lambda g: g * n * a ** (n - 1)),))

    def __getitem__(self, idx):
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            if _needs_add_at(idx):
                np.add.at(out, idx, g)
            else:
                out[idx] = g
            return out

        return Var(self.value[idx], ((self, vjp),))

    # -- reductions ---------------------------------------------------------
    def sum(self):
        shape = self.shape
        return Var(self.value.sum(), ((self, lambda g: np.broadcast_to(g, shape)),))

    def mean(self):
        shape, n = self.shape, self.value.size
        return Var(self.value.mean(), ((self, lambda g: np.broadcast_to(g / n, shape)),))

    def reshape(self, *shape):
        old = self.shape
        return Var(self.value.reshape(*shape), ((self, lambda g: np.reshape(g, old)),))

    # -- backward -----------------------------------------------------------
    def backward(self, seed=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for all ancestors."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                pg = vjp(g)
                parent.grad = pg if parent.grad is None else parent.grad + pg


def _needs_add_at(idx):
    # fancy (integer array) indexing may repeat indices, plain slicing cannot
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _topological(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def concat(items):
    """Concatenate 1-D Vars/arrays along axis 0."""
    values = [it.value if isinstance(it, Var) else np.asarray(it, dtype=np.float64)
              for it in items]
    sizes = [v.shape[0] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(
        (it, (lambda lo, hi: (lambda g: g[lo:hi]))(offsets[i], offsets[i + 1]))
        for i, it in enumerate(items) if isinstance(it, Var))
    return Var(np.concatenate(values), parents)


def value_of(x):
    """Plain numpy value of a Var or array-like."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def absolute(x):
    if isinstance(x, Var):
        s = np.sign(x.value)
        return Var(np.abs(x.value), ((x, lambda g: g * s),))
    return np.abs(x)
