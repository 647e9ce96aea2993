"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op returns a fresh :class:`Node` holding its value and, per parent, a
closure mapping the upstream gradient to that parent's contribution.  The
graph is rebuilt on each forward pass.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

GradFn = Callable[[np.ndarray], np.ndarray]


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}")


class GraphError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "_grad", "parents", "requires_grad", "op")

    def __init__(self, value, parents: Sequence[tuple["Node", GradFn]] = (),
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self.op = op

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise ShapeError("grad", self.value.shape, g.shape)
        self._grad = g

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x)


def param(x) -> Node:
    return Node(np.array(x, dtype=np.float64), requires_grad=True)


def detach(x: Node) -> Node:
    return Node(as_node(x).value)


def _make(value, op, parents) -> Node:
    live = [(p, fn) for p, fn in parents if p.requires_grad]
    return Node(value, live, requires_grad=bool(live), op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bshape(op, a: Node, b: Node):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _bshape("add", a, b)
    return _make(a.value + b.value, "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _bshape("sub", a, b)
    return _make(a.value - b.value, "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _bshape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", [
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ])


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _bshape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, "div", [
        (a, lambda g: _unbroadcast(g / bv, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / bv, b.shape)),
    ])


def tanh(x) -> Node:
    x = as_node(x)
    y = np.tanh(x.value)
    return _make(y, "tanh", [(x, lambda g: g * (1.0 - y * y))])


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), "relu", [(x, lambda g: g * mask)])


def sigmoid(x) -> Node:
    x = as_node(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _make(y, "sigmoid", [(x, lambda g: g * y * (1.0 - y))])


def exp(x) -> Node:
    x = as_node(x)
    y = np.exp(x.value)
    return _make(y, "exp", [(x, lambda g: g * y)])


def log(x) -> Node:
    x = as_node(x)
    xv = x.value
    return _make(np.log(xv), "log", [(x, lambda g: g / xv)])


def square(x) -> Node:
    x = as_node(x)
    xv = x.value
    return _make(xv * xv, "square", [(x, lambda g: 2.0 * g * xv)])


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _make(av @ bv, "matmul", [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


# ---------------------------------------------------------------- reductions

def _check_axis(op, x: Node, axis):
    if axis is not None and not -x.value.ndim <= axis < x.value.ndim:
        raise ShapeError(op, x.shape, (axis,))


def sum_(x, axis=None) -> Node:
    x = as_node(x)
    _check_axis("sum", x, axis)
    shape = x.shape
    if axis is None:
        return _make(np.sum(x.value), "sum", [(x, lambda g: np.broadcast_to(g, shape).copy())])
    return _make(np.sum(x.value, axis=axis), "sum", [
        (x, lambda g: np.broadcast_to(np.expand_dims(g, axis), shape).copy()),
    ])


def mean_axis(x, axis=None) -> Node:
    x = as_node(x)
    _check_axis("mean_axis", x, axis)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def var_axis(x, axis: int = 0) -> Node:
    """Population variance (divide by count) along ``axis``."""
    x = as_node(x)
    _check_axis("var_axis", x, axis)
    n = x.shape[axis]
    mu = np.mean(x.value, axis=axis, keepdims=True)
    d = x.value - mu
    out = np.mean(d * d, axis=axis)
    # d/dx_i of mean((x-mu)^2) = 2 (x_i - mu) / n ; the mu term sums to zero
    return _make(out, "var_axis", [
        (x, lambda g: np.expand_dims(g, axis) * (2.0 / n) * d),
    ])


def sq_norm(x) -> Node:
    x = as_node(x)
    xv = x.value
    return _make(np.sum(xv * xv), "sq_norm", [(x, lambda g: 2.0 * g * xv)])


# ---------------------------------------------------------------- structure

def concat(xs: Iterable, axis: int = -1) -> Node:
    xs = [as_node(x) for x in xs]
    if not xs:
        raise ShapeError("concat")
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])
    parents = []
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        idx = [slice(None)] * out.ndim
        idx[ax] = slice(int(lo), int(hi))
        idx = tuple(idx)
        parents.append((x, lambda g, idx=idx: g[idx]))
    return _make(out, "concat", parents)


def _is_basic(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (slice, int, np.integer)) for k in keys)


def slice_(x, key) -> Node:
    x = as_node(x)
    try:
        out = x.value[key]
    except IndexError:
        raise ShapeError("slice", x.shape) from None
    shape = x.shape
    basic = _is_basic(key)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return full

    return _make(np.array(out, dtype=np.float64), "slice", [(x, back)])


def reshape(x, shape) -> Node:
    x = as_node(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    old = x.shape
    return _make(out, "reshape", [(x, lambda g: g.reshape(old))])


# ---------------------------------------------------------------- backward

def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf with requires_grad."""
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    adj = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = adj.get(id(node))
        if g is None:
            continue
        for p, fn in node.parents:
            c = fn(g)
            k = id(p)
            if k in adj:
                adj[k] = adj[k] + c
            else:
                adj[k] = c
    # adjoints are pass-local so a repeated backward adds exactly once more
    for node in order:
        g = adj.get(id(node))
        if g is None or node.parents:
            continue
        g = np.reshape(g, node.shape)
        node._grad = np.array(g, dtype=np.float64) if node._grad is None else node._grad + g
