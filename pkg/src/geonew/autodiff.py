"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation eagerly, in execution order, so the
record is already topologically sorted.  :meth:`Tape.backward` walks it in
reverse and accumulates cotangents; seeding with an arbitrary cotangent is
what the adjoint method needs (one pass seeded with ``-lambda``).

    tape = Tape()
    x = tape.leaf(np.ones(3))
    y = ad.sum(ad.tanh(x) * x)
    (gx,) = tape.backward(y, wrt=[x])
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class Var:
    __slots__ = ("tape", "value", "parents", "grad_fn", "requires_grad", "index")
    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), grad_fn=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value, requires_grad: bool = True) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64), requires_grad=requires_grad)

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64))

    def backward(self, output: Var, seed=None, wrt=None):
        """Reverse sweep from ``output``.

        ``seed`` is the cotangent of ``output`` (required unless it is a
        scalar).  Returns the list of gradients for ``wrt`` (zeros for leaves
        the output does not depend on); with ``wrt=None`` a dict keyed by node
        index is returned.
        """
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        if seed is None:
            if output.value.size != 1:
                raise ShapeError(f"a cotangent seed is required for non-scalar output of shape {output.shape}")
            seed = np.ones_like(output.value)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.shape:
                raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")
        grads = {output.index: seed}
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = nodes[i]
            if node.grad_fn is None:
                continue
            pgrads = node.grad_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                j = p.index
                if j in grads:
                    grads[j] = grads[j] + pg
                else:
                    grads[j] = pg
        if wrt is None:
            return grads
        return [grads[v.index] if v.index in grads else np.zeros_like(v.value) for v in wrt]


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.const(x)


def _make(tape, value, parents, grad_fn) -> Var:
    rg = any(p.requires_grad for p in parents)
    return Var(tape, value, parents if rg else (), grad_fn if rg else None, rg)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shapes(a: Var, b: Var, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(t, a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(t, a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    if not isinstance(b, Var) and np.isscalar(b):
        c = float(b)
        return _make(t, a.value * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Var) and np.isscalar(a):
        return mul(b, a)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_shapes(a, b, "mul")
    av, bv = a.value, b.value
    return _make(t, av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    _broadcast_shapes(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(t, out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def grad_fn(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(t, av @ bv, (a, b), grad_fn)


def spmatmul(s, x: Var) -> Var:
    """Constant sparse (or dense) matrix times ``x``."""
    if x.ndim != 2 or s.shape[1] != x.shape[0]:
        raise ShapeError(f"spmatmul: incompatible shapes {s.shape} and {x.shape}")
    st = s.T.tocsr() if sp.issparse(s) else s.T
    out = s @ x.value
    return _make(x.tape, np.asarray(out), (x,), lambda g: (np.asarray(st @ g),))


def transpose(a: Var) -> Var:
    return _make(a.tape, a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _make(a.tape, a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ------------------------------------------------------------- elementwise


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return _make(a.tape, out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _make(a.tape, out, (a,), lambda g: (g * out,))


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _make(a.tape, out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _make(a.tape, a.value * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Var) -> Var:
    """tanh approximation of GELU."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(a.tape, out, (a,), grad_fn)


def absolute(a: Var) -> Var:
    s = np.sign(a.value)
    return _make(a.tape, np.abs(a.value), (a,), lambda g: (g * s,))


def minimum(a: Var, c: float) -> Var:
    """Elementwise ``min(a, c)`` with a constant cap; the gradient flows where ``a < c``."""
    mask = a.value < c
    return _make(a.tape, np.where(mask, a.value, c), (a,), lambda g: (g * mask,))


def maximum(a: Var, c: float) -> Var:
    mask = a.value > c
    return _make(a.tape, np.where(mask, a.value, c), (a,), lambda g: (g * mask,))


# --------------------------------------------------------------- reductions


def sum(a: Var, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.tape, np.sum(a.value, axis=axis, keepdims=keepdims), (a,), grad_fn)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a: Var) -> Var:
    """Maximum over all entries; the gradient goes to the first maximizer."""
    k = int(np.argmax(a.value))
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out.flat[k] = g
        return (out,)

    return _make(a.tape, np.asarray(a.value.flat[k]), (a,), grad_fn)


# ------------------------------------------------------------ normalization


def softmax(a: Var, axis: int = -1) -> Var:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(a.tape, out, (a,), grad_fn)


def layer_norm(a: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Normalize over the last axis, then scale and shift."""
    t = a.tape
    gain, bias = _lift(t, gain), _lift(t, bias)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value
    d = x.shape[-1]

    def grad_fn(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    if gv.shape[-1] != d:
        raise ShapeError(f"layer_norm: gain shape {gv.shape} does not match feature size {d}")
    return _make(t, xhat * gv + bias.value, (a, gain, bias), grad_fn)


# --------------------------------------------------------- structural ops


def concat(xs, axis: int = -1) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} along axis {axis}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(t, out, tuple(xs), grad_fn)


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int)) or k is None or k is Ellipsis for k in parts)


def getitem(a: Var, key) -> Var:
    shape = a.shape
    basic = _is_basic(key)

    def grad_fn(g):
        out = np.zeros(shape)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(a.tape, a.value[key], (a,), grad_fn)


def gather_rows(a: Var, idx) -> Var:
    return take(a, idx, axis=0)


def take(a: Var, idx, axis: int = 0) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    unique = len(np.unique(idx)) == len(idx)

    def grad_fn(g):
        out = np.zeros(shape)
        if unique:
            if axis == 0:
                out[idx] = g
            else:
                out[:, idx] = g
        elif axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(out.T, idx, g.T)
        return (out,)

    if axis not in (0, 1):
        raise ValueError("take supports axis 0 or 1")
    return _make(a.tape, np.take(a.value, idx, axis=axis), (a,), grad_fn)


def broadcast_row(a: Var, n: int) -> Var:
    """Repeat a ``(1, d)`` or ``(d,)`` row ``n`` times into ``(n, d)``."""
    row = a.value.reshape(1, -1)
    shape = a.shape
    return _make(a.tape, np.repeat(row, n, axis=0), (a,), lambda g: (g.sum(axis=0).reshape(shape),))
