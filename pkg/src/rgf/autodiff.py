"""Minimal reverse-mode differentiation over numpy arrays.

Every op accepts plain arrays or :class:`Var`; when no argument is a ``Var``
the op is just the numpy computation, so the same model code serves fast
inference and gradient computation.
"""

from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def val(x):
    return x.value if isinstance(x, Var) else x


def _tracked(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _accum(v: Var, g) -> None:
    if v.grad is None:
        v.grad = np.array(g, dtype=v.value.dtype, copy=True)
    else:
        v.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    out = val(a) + val(b)
    if not _tracked(a, b):
        return out

    def bw(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, a.value.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g, b.value.shape))

    return Var(out, (a, b), bw)


def sub(a, b):
    out = val(a) - val(b)
    if not _tracked(a, b):
        return out

    def bw(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, a.value.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(-g, b.value.shape))

    return Var(out, (a, b), bw)


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    if not _tracked(a, b):
        return out

    def bw(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g * bv, a.value.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g * av, b.value.shape))

    return Var(out, (a, b), bw)


def scale(a, c: float):
    out = val(a) * c
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: _accum(a, g * c))


def matmul(a, b):
    av, bv = val(a), val(b)
    out = av @ bv
    if not _tracked(a, b):
        return out

    def bw(g):
        if isinstance(a, Var):
            if av.ndim == 1:
                _accum(a, g @ bv.T if g.ndim == 1 else (bv @ g.T).T)
            else:
                _accum(a, g @ bv.T if bv.ndim == 2 else np.outer(g, bv))
        if isinstance(b, Var):
            if av.ndim == 1:
                _accum(b, np.outer(av, g))
            elif bv.ndim == 1:
                _accum(b, av.T @ g)
            else:
                _accum(b, av.T @ g)

    return Var(out, (a, b), bw)


def tanh(a):
    out = np.tanh(val(a))
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def sigmoid(a):
    x = val(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    if not isinstance(a, Var):
        return out
    return Var(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def concat(xs, axis: int = -1):
    vals = [val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _tracked(*xs):
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        for x, p in zip(xs, parts):
            if isinstance(x, Var):
                _accum(x, p)

    return Var(out, tuple(xs), bw)


def take_rows(table, idx):
    """``table[idx]`` along the first axis (embedding lookup / row gather)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = val(table)[idx]
    if not isinstance(table, Var):
        return out

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        _accum(table, full)

    return Var(out, (table,), bw)


def sum_rows(a):
    out = val(a).sum(axis=0)
    if not isinstance(a, Var):
        return out
    n = a.value.shape[0]
    return Var(out, (a,), lambda g: _accum(a, np.broadcast_to(g, (n,) + g.shape)))


def mean_rows(a):
    n = val(a).shape[0]
    return scale(sum_rows(a), 1.0 / n)


def softmax(x, axis: int = -1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, target, weight: float = 1.0, mask=None):
    """``-weight * sum(target * log_softmax(logits))`` over unmasked entries, as a scalar."""
    lv = val(logits)
    if mask is not None:
        lv = np.where(mask, lv, -1e30)
        target = np.where(mask, target, 0.0)
    ls = log_softmax(lv)
    safe = np.where(target > 0, ls, 0.0)
    out = np.asarray(-weight * np.sum(target * safe), dtype=lv.dtype)
    if not isinstance(logits, Var):
        return out
    p = np.exp(ls)

    def bw(g):
        grad = weight * (p * np.sum(target) - target)
        if mask is not None:
            grad = np.where(mask, grad, 0.0)
        _accum(logits, g * grad)

    return Var(out, (logits,), bw)


def softmax_mse(logits, target, weight: float = 1.0):
    """``weight * sum((softmax(logits) - target)^2)`` as a scalar."""
    p = softmax(val(logits))
    diff = p - target
    out = np.asarray(weight * np.sum(diff * diff), dtype=p.dtype)
    if not isinstance(logits, Var):
        return out

    def bw(g):
        d = 2.0 * weight * diff
        # Jacobian of softmax: diag(p) - p p^T
        _accum(logits, g * p * (d - np.sum(d * p)))

    return Var(out, (logits,), bw)


def total(terms):
    terms = list(terms)
    out = np.asarray(sum(val(t) for t in terms))
    if not _tracked(*terms):
        return out

    def bw(g):
        for t in terms:
            if isinstance(t, Var):
                _accum(t, g)

    return Var(out, tuple(terms), bw)


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable Var."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
