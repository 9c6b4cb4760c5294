"""Small reverse-mode differentiation engine over dense numpy arrays.

Every operation executed on a :class:`Node` is appended to the node's
:class:`Tape`.  Because nodes are appended as they are created, the tape is
already in topological order and :func:`backward` is a single reverse sweep.

Nodes hold whole arrays (an image, a vertex buffer), not scalars.  Expensive
kernels such as the soft rasterizer register themselves through
:func:`register_op` with a hand-written vector-Jacobian product.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import expit

# sqrt/norm derivative denominators are clamped here
CLAMP_EPS = 1e-12


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of the nodes produced during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None) -> "Node":
        node = Node(np.array(value, dtype=float), self, requires_grad=True, kind="leaf", name=name)
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def const(self, value) -> "Node":
        return Node(np.asarray(value, dtype=float), self, requires_grad=False, kind="const")

    @property
    def leaves(self):
        return [n for n in self.nodes if n.kind == "leaf"]

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("value", "grad", "tape", "requires_grad", "kind", "name", "parents", "vjp", "index")
    # make ndarray <op> Node dispatch to the Node's reflected operator
    __array_ufunc__ = None

    def __init__(self, value, tape, requires_grad=False, kind="const", name=None, parents=(), vjp=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.kind = kind
        self.name = name
        self.parents = parents
        self.vjp = vjp
        self.index = -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = self.name or self.kind
        return f"Node({label}, shape={self.value.shape})"

    def __add__(self, other):
        return record("add", [self, other])

    def __radd__(self, other):
        return record("add", [other, self])

    def __sub__(self, other):
        return record("subtract", [self, other])

    def __rsub__(self, other):
        return record("subtract", [other, self])

    def __mul__(self, other):
        return record("multiply", [self, other])

    def __rmul__(self, other):
        return record("multiply", [other, self])

    def __truediv__(self, other):
        return record("divide", [self, other])

    def __rtruediv__(self, other):
        return record("divide", [other, self])

    def __pow__(self, other):
        return record("power", [self, other])

    def __neg__(self):
        return record("negative", [self])

    def __matmul__(self, other):
        return record("matmul", [self, other])

    def __rmatmul__(self, other):
        return record("matmul", [other, self])

    def __getitem__(self, idx):
        return record("getitem", [self], idx=idx)

    @property
    def T(self):
        return record("transpose", [self])


# op kind -> forward(*values, **attrs) returning (value, vjp); vjp(g) -> tuple of input grads
OPS: dict[str, Callable] = {}


def register_op(kind: str):
    def deco(fn):
        OPS[kind] = fn
        return fn
    return deco


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _find_tape(inputs):
    for x in inputs:
        if isinstance(x, Node) and x.tape is not None:
            return x.tape
    return None


def record(op_kind: str, inputs, **attrs) -> Node:
    """Evaluate ``op_kind`` on ``inputs`` and append the result to the tape."""
    try:
        fwd = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    tape = _find_tape(inputs)
    nodes = [x if isinstance(x, Node) else Node(np.asarray(x, dtype=float), tape) for x in inputs]
    values = [n.value for n in nodes]
    try:
        out, vjp = fwd(*values, **attrs)
    except ShapeError:
        raise
    except (ValueError, IndexError) as exc:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"{op_kind}: incompatible input shapes ({shapes}): {exc}") from None
    out = np.asarray(out, dtype=float)
    needs = any(n.requires_grad for n in nodes)
    if tape is None or not needs:
        return Node(out, tape)
    node = Node(out, tape, requires_grad=True, kind=op_kind, parents=tuple(nodes), vjp=vjp)
    node.index = len(tape.nodes)
    tape.nodes.append(node)
    return node


def backward(root: Node) -> dict:
    """Reverse sweep from a scalar ``root``; returns ``{leaf: grad}`` for every leaf on the tape."""
    if not isinstance(root, Node) or root.value.size != 1:
        shape = getattr(root, "shape", None)
        raise ShapeError(f"backward: root must be a scalar node, got shape {shape}")
    tape = root.tape
    if tape is None:
        return {}
    for n in tape.nodes:
        n.grad = None
    if root.requires_grad:
        root.grad = np.ones_like(root.value)
        for node in reversed(tape.nodes[: root.index + 1]):
            if node.grad is None or node.vjp is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=float), parent.value.shape)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad = parent.grad + g
    out = {}
    for leaf in tape.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
        out[leaf] = leaf.grad
    return out


def _check_broadcast(kind, *values):
    try:
        np.broadcast_shapes(*(v.shape for v in values))
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"{kind}: cannot broadcast shapes ({shapes})") from None


# ----------------------------------------------------------------- elementwise

@register_op("add")
def _add(a, b):
    _check_broadcast("add", a, b)
    return a + b, lambda g: (g, g)


@register_op("subtract")
def _sub(a, b):
    _check_broadcast("subtract", a, b)
    return a - b, lambda g: (g, -g)


@register_op("multiply")
def _mul(a, b):
    _check_broadcast("multiply", a, b)
    return a * b, lambda g: (g * b, g * a)


@register_op("divide")
def _div(a, b):
    _check_broadcast("divide", a, b)
    out = a / b
    return out, lambda g: (g / b, -g * out / b)


@register_op("power")
def _pow(a, b):
    _check_broadcast("power", a, b)
    out = a ** b

    def vjp(g):
        ga = g * b * a ** (b - 1.0)
        safe = np.where(a > 0, a, 1.0)
        gb = g * out * np.where(a > 0, np.log(safe), 0.0)
        return ga, gb
    return out, vjp


@register_op("negative")
def _neg(a):
    return -a, lambda g: (-g,)


@register_op("sqrt")
def _sqrt(a):
    out = np.sqrt(np.maximum(a, 0.0))
    denom = np.sqrt(np.maximum(a, CLAMP_EPS))
    return out, lambda g: (0.5 * g / denom,)


@register_op("sigmoid")
def _sigmoid(a):
    s = expit(a)
    return s, lambda g: (g * s * (1.0 - s),)


@register_op("softplus")
def _softplus(a):
    return np.logaddexp(0.0, a), lambda g: (g * expit(a),)


@register_op("sin")
def _sin(a):
    return np.sin(a), lambda g: (g * np.cos(a),)


@register_op("cos")
def _cos(a):
    return np.cos(a), lambda g: (-g * np.sin(a),)


@register_op("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@register_op("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


@register_op("abs")
def _abs(a):
    # subgradient 0 at 0
    return np.abs(a), lambda g: (g * np.sign(a),)


@register_op("minimum")
def _minimum(a, b):
    _check_broadcast("minimum", a, b)
    take_a = a <= b
    return np.minimum(a, b), lambda g: (g * take_a, g * ~take_a)


@register_op("maximum")
def _maximum(a, b):
    _check_broadcast("maximum", a, b)
    take_a = a >= b
    return np.maximum(a, b), lambda g: (g * take_a, g * ~take_a)


@register_op("clamp")
def _clamp(a, lo=-np.inf, hi=np.inf):
    inside = (a >= lo) & (a <= hi)
    return np.clip(a, lo, hi), lambda g: (g * inside,)


@register_op("where")
def _where(a, b, mask=None):
    _check_broadcast("where", a, b, np.asarray(mask))
    m = np.asarray(mask, dtype=bool)
    return np.where(m, a, b), lambda g: (g * m, g * ~m)


# ----------------------------------------------------------------- vector ops

@register_op("dot")
def _dot(a, b):
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last dimensions differ ({a.shape} vs {b.shape})")
    return np.sum(a * b, axis=-1), lambda g: (g[..., None] * b, g[..., None] * a)


@register_op("cross")
def _cross(a, b):
    if a.shape[-1:] != (3,) or b.shape[-1:] != (3,):
        raise ShapeError(f"cross: expected 3-vectors, got shapes ({a.shape}, {b.shape})")
    return np.cross(a, b), lambda g: (np.cross(b, g), np.cross(g, a))


@register_op("norm")
def _norm(a):
    sq = np.sum(a * a, axis=-1)
    out = np.sqrt(sq)
    denom = np.sqrt(np.maximum(sq, CLAMP_EPS))
    return out, lambda g: ((g / denom)[..., None] * a,)


@register_op("matvec")
def _matvec(m, v):
    if m.ndim < 2 or v.ndim < 1 or m.shape[-1] != v.shape[-1]:
        raise ShapeError(f"matvec: matrix {m.shape} incompatible with vector {v.shape}")
    out = np.einsum("...ij,...j->...i", m, v)

    def vjp(g):
        return g[..., :, None] * v[..., None, :], np.einsum("...ij,...i->...j", m, g)
    return out, vjp


@register_op("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a @ b
    return out, lambda g: (g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g)


@register_op("sum")
def _sum(a, axis=None, keepdims=False):
    out = np.sum(a, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return out, vjp


# ----------------------------------------------------------------- structure

@register_op("reshape")
def _reshape(a, shape=None):
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


@register_op("transpose")
def _transpose(a):
    return np.swapaxes(a, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)


@register_op("getitem")
def _getitem(a, idx=None):
    out = a[idx]

    def vjp(g):
        z = np.zeros_like(a)
        np.add.at(z, idx, g)
        return (z,)
    return out, vjp


@register_op("stack")
def _stack(*xs, axis=0):
    out = np.stack(np.broadcast_arrays(*xs), axis=axis)

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(xs)))
    return out, vjp


@register_op("concat")
def _concat(*xs, axis=0):
    out = np.concatenate(xs, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    return out, vjp


# ----------------------------------------------------------------- functional API

def add(a, b): return record("add", [a, b])
def subtract(a, b): return record("subtract", [a, b])
def multiply(a, b): return record("multiply", [a, b])
def divide(a, b): return record("divide", [a, b])
def power(a, b): return record("power", [a, b])
def sqrt(a): return record("sqrt", [a])
def sigmoid(a): return record("sigmoid", [a])
def softplus(a): return record("softplus", [a])
def sin(a): return record("sin", [a])
def cos(a): return record("cos", [a])
def exp(a): return record("exp", [a])
def log(a): return record("log", [a])
def absolute(a): return record("abs", [a])
def minimum(a, b): return record("minimum", [a, b])
def maximum(a, b): return record("maximum", [a, b])
def clamp(a, lo=-np.inf, hi=np.inf): return record("clamp", [a], lo=lo, hi=hi)
def where(mask, a, b): return record("where", [a, b], mask=np.asarray(mask, dtype=bool))
def dot(a, b): return record("dot", [a, b])
def cross(a, b): return record("cross", [a, b])
def norm(a): return record("norm", [a])
def matvec(m, v): return record("matvec", [m, v])
def matmul(a, b): return record("matmul", [a, b])
def reshape(a, shape): return record("reshape", [a], shape=tuple(shape))
def transpose(a): return record("transpose", [a])
def stack(xs, axis=0): return record("stack", list(xs), axis=axis)
def concat(xs, axis=0): return record("concat", list(xs), axis=axis)


def total(a, axis=None, keepdims=False):
    return record("sum", [a], axis=axis, keepdims=keepdims)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=float)


def grad_check(f, x0, step=1e-5):
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` takes a leaf node holding the parameter vector and returns a scalar node.
    The error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    x0 = np.array(x0, dtype=float)
    tape = Tape()
    x = tape.leaf(x0)
    analytic = backward(f(x))[x].reshape(-1)

    def evaluate(xv):
        t = Tape()
        return float(value_of(f(t.leaf(xv))))

    flat = x0.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fd[i] = (evaluate(xp.reshape(x0.shape)) - evaluate(xm.reshape(x0.shape))) / (2.0 * step)
    err = np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))
    return float(np.max(err)) if err.size else 0.0
