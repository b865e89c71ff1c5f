"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Values are computed eagerly; each op records its parents and a closure that
maps the output gradient to parent gradients. backward() walks the tape in
iterative topological order (graphs here contain thousands of nodes from
long recurrences, so no recursion). Non-Tensor operands are treated as
constants.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "bwd")

    def __init__(self, value, parents=(), bwd=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, out, da_fn, db_fn):
    parents = []
    grads = []
    if isinstance(a, Tensor):
        parents.append(a)
        grads.append(da_fn)
    if isinstance(b, Tensor):
        parents.append(b)
        grads.append(db_fn)
    if not parents:
        return Tensor(out)

    def bwd(g):
        return tuple(fn(g) for fn in grads)

    return Tensor(out, tuple(parents), bwd)


def add(a, b):
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av + bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    )


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av - bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    )


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av * bv,
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    )


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = av @ bv
    return _binary(
        a, b, out,
        lambda g: _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape),
        lambda g: _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape),
    )


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to the first operand."""
    av, bv = _val(a), _val(b)
    take_a = av >= bv
    return _binary(
        a, b, np.where(take_a, av, bv),
        lambda g: _unbroadcast(np.where(take_a, g, 0.0), av.shape),
        lambda g: _unbroadcast(np.where(take_a, 0.0, g), bv.shape),
    )


def _unary(a, out, da):
    if not isinstance(a, Tensor):
        return Tensor(out)
    return Tensor(out, (a,), lambda g: (da(g),))


def neg(a):
    return _unary(a, -_val(a), lambda g: -g)


def sigmoid(a):
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ev = np.exp(av[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _unary(a, out, lambda g: g * out * (1.0 - out))


def tanh(a):
    out = np.tanh(_val(a))
    return _unary(a, out, lambda g: g * (1.0 - out * out))


def elu(a):
    av = _val(a)
    neg_part = np.exp(np.minimum(av, 0.0)) - 1.0
    out = np.where(av > 0.0, av, neg_part)
    deriv = np.where(av > 0.0, 1.0, neg_part + 1.0)
    return _unary(a, out, lambda g: g * deriv)


def softplus(a):
    av = _val(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    sig = np.empty_like(av)
    pos = av >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ev = np.exp(av[~pos])
    sig[~pos] = ev / (1.0 + ev)
    return _unary(a, out, lambda g: g * sig)


def reshape(a, shape):
    av = _val(a)
    return _unary(a, av.reshape(shape), lambda g: g.reshape(av.shape))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _unary(a, _val(a).transpose(axes), lambda g: g.transpose(inv))


def slice_(a, key):
    av = _val(a)

    def da(g):
        out = np.zeros_like(av)
        out[key] = g
        return out

    return _unary(a, av[key], da)


def concat(tensors, axis):
    values = [_val(t) for t in tensors]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(t for t in tensors if isinstance(t, Tensor))

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if isinstance(t, Tensor):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return Tensor(out, parents, bwd)


def sum_(a, axis=None, keepdims=False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, av.shape).copy()

    return _unary(a, out, da)


def mean_(a, axis=None, keepdims=False):
    av = _val(a)
    count = av.size if axis is None else av.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / count)


def layer_norm(a, eps=1e-6):
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    av = _val(a)
    mu = av.mean(axis=-1, keepdims=True)
    var = av.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (av - mu) * inv

    def da(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gym)

    return _unary(a, y, da)


def masked_softmax(a, mask):
    """Softmax over the last axis with boolean `mask` (True = attendable).

    Masked positions get probability zero; every row must keep at least one
    attendable position.
    """
    av = _val(a)
    neg = np.where(mask, av, -np.inf)
    m = np.max(neg, axis=-1, keepdims=True)
    e = np.exp(neg - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def da(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    return _unary(a, y, da)


def dropout(a, rate, rng):
    """Inverted dropout; identity when rng is None or rate == 0."""
    if rng is None or rate <= 0.0:
        return a
    av = _val(a)
    keep = 1.0 - rate
    mask = (rng.random(av.shape) < keep) / keep
    return _unary(a, av * mask, lambda g: g * mask)


def backward(root: Tensor):
    """Accumulate gradients of a scalar `root` into every reachable Tensor."""
    if root.value.size != 1:
        raise ValueError("backward() expects a scalar root")

    # iterative post-order topological sort
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)

    for node in reversed(order):
        if node.bwd is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.bwd(node.grad)):
            if g is None:
                continue
            # grads are only ever rebound (never mutated), so aliasing is safe
            parent.grad = g if parent.grad is None else parent.grad + g
