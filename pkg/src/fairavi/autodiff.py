"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape is built implicitly: every operation returns a ``Node``
holding its value, a zero-initialized gradient buffer, links to its
parents and a backward rule.  ``backward`` walks the tape in reverse
topological order.  Gradients accumulate; call ``zero_grad`` between
optimizer steps.

The op set covers what the network needs: matrix product, (broadcast)
add, subtract, Hadamard product, tanh, sigmoid, softmax over the last
axis, exp, log, clip, concatenate/stack, sum, mean, slicing, transpose,
reshape, and the gradient reversal node ``grl``.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform to an op's shape rule."""


class GradCheckError(RuntimeError):
    """A non-finite value was met while finite-differencing."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Node:
    """One entry of the differentiation tape.

    value         -- float64 ndarray
    grad          -- same-shape accumulation buffer, zero-initialized
                     (allocated on first touch)
    parents       -- upstream Nodes
    requires_grad -- True for trainable leaves and anything built on them
    op            -- name of the producing op ("leaf" for inputs)
    """

    __slots__ = ("value", "_grad", "parents", "requires_grad", "op", "_backward")

    def __init__(self, value, parents=(), requires_grad=False, op="leaf", backward=None):
        self.value = _as_array(value)
        self._grad = None
        self.parents = parents if isinstance(parents, tuple) else tuple(parents)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)
        self.op = op
        self._backward = backward

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, v):
        self._grad = v

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar used throughout the layers
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def constant(x) -> Node:
    """Wrap an array as a non-trainable leaf."""
    return x if isinstance(x, Node) else Node(x)


def parameter(x) -> Node:
    """Wrap an array as a trainable leaf."""
    return Node(x, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _combine(op, a, b):
    """Apply a numpy ufunc, rewriting broadcast failures as ShapeMismatch."""
    try:
        return op(a.value, b.value)
    except ValueError:
        raise ShapeMismatch(
            f"{op.__name__}: shapes {a.value.shape} and {b.value.shape} do not broadcast")


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    out = Node(_combine(np.add, a, b), (a, b), op="add")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.value.shape)

    out._backward = backward
    return out


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    out = Node(_combine(np.subtract, a, b), (a, b), op="sub")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.value.shape)

    out._backward = backward
    return out


def mul(a, b) -> Node:
    """Hadamard (elementwise, broadcasting) product."""
    a, b = constant(a), constant(b)
    out = Node(_combine(np.multiply, a, b), (a, b), op="mul")

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.value, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.value.shape)

    out._backward = backward
    return out


def matmul(a, b) -> Node:
    """2-D matrix product."""
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.value.shape} and {b.value.shape} are not aligned")
    out = Node(a.value @ b.value, (a, b), op="matmul")

    def backward(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    out._backward = backward
    return out


# --------------------------------------------------------------- unary ops

def neg(a) -> Node:
    a = constant(a)
    out = Node(-a.value, (a,), op="neg")

    def backward(g):
        if a.requires_grad:
            a.grad -= g

    out._backward = backward
    return out


def tanh(a) -> Node:
    a = constant(a)
    y = np.tanh(a.value)
    out = Node(y, (a,), op="tanh")

    def backward(g):
        if a.requires_grad:
            a.grad += g * (1.0 - y * y)

    out._backward = backward
    return out


def sigmoid(a) -> Node:
    a = constant(a)
    # exp overflow on the far-negative tail yields inf -> exactly 0.0
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.value))
    out = Node(y, (a,), op="sigmoid")

    def backward(g):
        if a.requires_grad:
            a.grad += g * y * (1.0 - y)

    out._backward = backward
    return out


def exp(a) -> Node:
    a = constant(a)
    y = np.exp(a.value)
    out = Node(y, (a,), op="exp")

    def backward(g):
        if a.requires_grad:
            a.grad += g * y

    out._backward = backward
    return out


def log(a) -> Node:
    a = constant(a)
    out = Node(np.log(a.value), (a,), op="log")

    def backward(g):
        if a.requires_grad:
            a.grad += g / a.value

    out._backward = backward
    return out


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    a = constant(a)
    y = np.clip(a.value, lo, hi)
    mask = (a.value >= lo) & (a.value <= hi)
    out = Node(y, (a,), op="clip")

    def backward(g):
        if a.requires_grad:
            a.grad += g * mask

    out._backward = backward
    return out


def softmax(a) -> Node:
    """Softmax over the last axis."""
    a = constant(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Node(y, (a,), op="softmax")

    def backward(g):
        if a.requires_grad:
            a.grad += y * (g - (g * y).sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


# ------------------------------------------------------------ shape ops

def concat(nodes, axis: int = -1) -> Node:
    nodes = [constant(n) for n in nodes]
    if not nodes:
        raise ShapeMismatch("concat: empty input list")
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            f"concat: shapes {[n.value.shape for n in nodes]} do not align on axis {axis}")
    out = Node(value, tuple(nodes), op="concat")
    ax = axis if axis >= 0 else value.ndim + axis
    sizes = [n.value.shape[ax] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * value.ndim
        for n, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            if n.requires_grad:
                sl[ax] = slice(start, stop)
                n.grad += g[tuple(sl)]

    out._backward = backward
    return out


def stack(nodes, axis: int = 0) -> Node:
    nodes = [constant(n) for n in nodes]
    shapes = {n.value.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeMismatch(f"stack: mismatched shapes {sorted(shapes)}")
    value = np.stack([n.value for n in nodes], axis=axis)
    out = Node(value, tuple(nodes), op="stack")

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        for i, n in enumerate(nodes):
            if n.requires_grad:
                n.grad += moved[i]

    out._backward = backward
    return out


def reshape(a, shape) -> Node:
    a = constant(a)
    out = Node(a.value.reshape(shape), (a,), op="reshape")

    def backward(g):
        if a.requires_grad:
            a.grad += g.reshape(a.value.shape)

    out._backward = backward
    return out


def transpose(a, axes=None) -> Node:
    a = constant(a)
    out = Node(np.transpose(a.value, axes), (a,), op="transpose")
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.grad += np.transpose(g, inv)

    out._backward = backward
    return out


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis
               for p in parts)


def slice_(a, idx) -> Node:
    a = constant(a)
    out = Node(a.value[idx], (a,), op="slice")
    basic = _is_basic_index(idx)

    def backward(g):
        if a.requires_grad:
            if basic:  # basic indexing never repeats elements
                a.grad[idx] += g
            else:
                np.add.at(a.grad, idx, g)

    out._backward = backward
    return out


# --------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = constant(a)
    out = Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), op="sum")

    def backward(g):
        if a.requires_grad:
            a.grad += _spread(g, a.value.shape, axis, keepdims)

    out._backward = backward
    return out


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = constant(a)
    out = Node(a.value.mean(axis=axis, keepdims=keepdims), (a,), op="mean")
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)])

    def backward(g):
        if a.requires_grad:
            a.grad += _spread(g, a.value.shape, axis, keepdims) / count

    out._backward = backward
    return out


def _spread(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, tuple(np.atleast_1d(axis)))
    return np.broadcast_to(g, shape)


# ------------------------------------------------------- gradient reversal

def grl(a, lam: float) -> Node:
    """Gradient reversal: identity forward, -lam * upstream backward."""
    if lam < 0:
        raise ValueError(f"grl: lambda must be nonnegative, got {lam}")
    a = constant(a)
    out = Node(a.value, (a,), op="grl")

    def backward(g):
        if a.requires_grad:
            a.grad += (-lam) * g

    out._backward = backward
    return out


# ------------------------------------------------------------ op registry

OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "neg": neg,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "clip": clip,
    "softmax": softmax,
    "concat": concat,
    "stack": stack,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "grl": grl,
}


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Node:
    """Dispatch a registered op by name."""
    if kind not in OPS:
        raise KeyError(f"unknown op {kind!r}")
    fn = OPS[kind]
    attrs = attrs or {}
    if kind in ("concat", "stack"):
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------- backward

def topo_order(root: Node) -> list[Node]:
    """All reachable nodes, parents before children."""
    order, seen, work = [], set(), [(root, False)]
    while work:
        node, expanded = work.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        work.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                work.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(leaf) into leaf .grad buffers.

    Interior-node gradients are scratch state of one pass and are reset
    here; leaf gradients accumulate across calls until zero_grad.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    order = topo_order(loss)
    for node in order:
        if node.parents:
            node._grad = None
    loss.grad += np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)


def zero_grad(nodes) -> None:
    for n in nodes:
        n.zero_grad()


# -------------------------------------------------------------- grad check

def grad_check(fn, point, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps a list of Nodes (one per array in `point`) to a scalar Node.
    Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    arrays = [_as_array(p) for p in point]
    leaves = [parameter(a.copy()) for a in arrays]
    out = fn(leaves)
    if out.value.size != 1:
        raise ValueError("grad_check: function must be scalar-valued")
    backward(out)
    analytic = [lf.grad.copy() for lf in leaves]

    def evaluate(pert):
        val = fn([constant(p) for p in pert]).value
        return float(np.asarray(val).reshape(()))

    worst = 0.0
    for pi, a in enumerate(arrays):
        flat = a.ravel()
        for ci in range(flat.size):
            bumped = [x.copy() for x in arrays]
            bumped[pi].ravel()[ci] = flat[ci] + h
            f_plus = evaluate(bumped)
            bumped[pi].ravel()[ci] = flat[ci] - h
            f_minus = evaluate(bumped)
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic_c = analytic[pi].ravel()[ci]
            if not (np.isfinite(numeric) and np.isfinite(analytic_c)):
                raise GradCheckError(
                    f"non-finite value at parameter {pi}, coordinate {ci}: "
                    f"analytic={analytic_c}, numeric={numeric}")
            err = abs(analytic_c - numeric) / max(1e-8, abs(analytic_c) + abs(numeric))
            worst = max(worst, err)
    return worst


def grad_check_params(loss_fn, params: dict, h: float = 1e-5) -> float:
    """grad_check against a live parameter dict, perturbing values in place.

    loss_fn() must rebuild the graph from the current parameter values and
    return a scalar Node.  Same relative-error definition as grad_check.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {n: p.grad.copy() for n, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.value.ravel()
        for ci in range(flat.size):
            old = flat[ci]
            flat[ci] = old + h
            f_plus = float(np.asarray(loss_fn().value).reshape(()))
            flat[ci] = old - h
            f_minus = float(np.asarray(loss_fn().value).reshape(()))
            flat[ci] = old
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic_c = analytic[name].ravel()[ci]
            if not (np.isfinite(numeric) and np.isfinite(analytic_c)):
                raise GradCheckError(
                    f"non-finite value at parameter {name}, coordinate {ci}: "
                    f"analytic={analytic_c}, numeric={numeric}")
            err = abs(analytic_c - numeric) / max(1e-8, abs(analytic_c) + abs(numeric))
            worst = max(worst, err)
    return worst
