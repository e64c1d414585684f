"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records every differentiable operation in creation order, which
is already a topological order, so the backward pass is a single reversed
sweep that visits each node exactly once.  Scope is deliberately small:
the affine/tanh/sigmoid/elementwise/log-sum-exp vocabulary the engine's
losses need, nothing more.
"""

from __future__ import annotations

import numpy as np


class Tape:
    """Ordered record of differentiable ops plus the parameter leaves."""

    __slots__ = ("nodes", "leaves")

    def __init__(self):
        self.nodes = []
        self.leaves = []  # (store_or_None, name_or_None, Var)


class Var:
    """Array-valued node. ``tape is None`` marks a constant."""

    __slots__ = ("value", "grad", "_tape", "_vjps")

    def __init__(self, value, tape=None, vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._tape = tape
        self._vjps = vjps
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, powi(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, powi(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return powi(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(value, parents_vjps) -> Var:
    """Create a Var; record it only if some parent is differentiable."""
    vjps = tuple((p, fn) for p, fn in parents_vjps if p._tape is not None)
    if not vjps:
        return Var(value)
    return Var(value, vjps[0][0]._tape, vjps)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    val = a.value + b.value
    return _node(
        val,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ],
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    val = a.value * b.value
    return _node(
        val,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ],
    )


def powi(a, p) -> Var:
    a = as_var(a)
    p = float(p)
    val = a.value**p
    return _node(val, [(a, lambda g: g * p * a.value ** (p - 1.0))])


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    val = a.value @ b.value
    return _node(
        val,
        [
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ],
    )


def exp(a) -> Var:
    a = as_var(a)
    val = np.exp(a.value)
    return _node(val, [(a, lambda g: g * val)])


def log(a) -> Var:
    a = as_var(a)
    return _node(np.log(a.value), [(a, lambda g: g / a.value)])


def sqrt(a) -> Var:
    a = as_var(a)
    val = np.sqrt(a.value)
    return _node(val, [(a, lambda g: g * (0.5 / val))])


def tanh(a) -> Var:
    a = as_var(a)
    val = np.tanh(a.value)
    return _node(val, [(a, lambda g: g * (1.0 - val * val))])


def sigmoid(a) -> Var:
    a = as_var(a)
    val = 1.0 / (1.0 + np.exp(-a.value))
    return _node(val, [(a, lambda g: g * val * (1.0 - val))])


def clip(a, lo: float, hi: float) -> Var:
    """Clamp with unit gradient strictly inside [lo, hi], zero outside."""
    a = as_var(a)
    val = np.clip(a.value, lo, hi)
    mask = (a.value > lo) & (a.value < hi)
    return _node(val, [(a, lambda g: g * mask)])


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return _node(val, [(a, back)])


def vmean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def expand_dims(a, axis: int) -> Var:
    a = as_var(a)
    val = np.expand_dims(a.value, axis)
    return _node(val, [(a, lambda g: g.reshape(a.value.shape))])


def reshape(a, shape) -> Var:
    a = as_var(a)
    val = a.value.reshape(shape)
    return _node(val, [(a, lambda g: g.reshape(a.value.shape))])


def concat(vars_, axis: int) -> Var:
    vars_ = [as_var(v) for v in vars_]
    val = np.concatenate([v.value for v in vars_], axis=axis)
    sizes = [v.value.shape[axis] for v in vars_]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        sl = [slice(None)] * val.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(val, [(v, make_back(i)) for i, v in enumerate(vars_)])


def backward(tape: Tape, loss: Var) -> None:
    """Accumulate d loss / d x for every node on the tape.

    Parameter leaves flush their gradient into their ParamStore buffers.
    Untouched parameters keep their zero buffers.
    """
    if loss._tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar")
    for v in tape.nodes:
        v.grad = None
    loss.grad = np.ones_like(loss.value)
    for v in reversed(tape.nodes):
        g = v.grad
        if g is None:
            continue
        for parent, vjp in v._vjps:
            pg = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64)
            else:
                parent.grad += pg
    for store, name, leaf in tape.leaves:
        if store is not None and leaf.grad is not None:
            store.grads[name] += leaf.grad


def grad_of(v: Var) -> np.ndarray:
    """Gradient of a leaf after backward(); zeros if the leaf was unused."""
    if v.grad is None:
        return np.zeros_like(v.value)
    return v.grad
