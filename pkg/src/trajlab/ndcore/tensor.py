"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each operation records its parents and a closure that pushes the output
gradient back to them. ``Tensor.backward`` walks the graph in reverse
topological order. Graph recording is skipped inside :func:`no_grad` and
whenever no input requires a gradient, so sampling loops stay cheap.
"""
from __future__ import annotations

import contextlib

import numpy as np

MASK_FILL = -1e30

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes do not conform."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data.ravel()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise ---------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def sigmoid(a):
    a = as_tensor(a)
    # split form avoids overflow in exp for large |x|
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def softplus(a):
    """log(1 + exp(x)), stable for either sign."""
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)

    def back(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, (a,), back)


def square(a):
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


# -- linear algebra / reshaping -------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int)) or k is None or k is Ellipsis for k in parts)

    def back(g):
        full = np.zeros(shape)
        if basic:
            # basic indexing never repeats an element
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def embedding(table, idx):
    """Row lookup ``table[idx]`` with scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx.ravel(), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[idx], (table,), back)


def pick(a, idx):
    """Select ``a[..., idx]`` along the last axis (one index per row)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), back)


# -- softmax family --------------------------------------------------------
def log_softmax(logits, mask=None):
    """Row-wise log-softmax over the last axis.

    Masked-out entries receive ``MASK_FILL`` before normalisation, so their
    probability is exactly zero and no gradient reaches them.
    """
    logits = as_tensor(logits)
    z = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        z = np.where(mask, z, z + MASK_FILL)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), back)


def softmax(logits, mask=None):
    return exp(log_softmax(logits, mask))


def softmax_cross_entropy(logits, labels, mask=None, weights=None):
    """Mean negative log-likelihood of ``labels`` under masked softmax.

    ``labels`` may be an index array or a one-hot matrix. ``weights``
    (same leading shape as labels) lets padded rows drop out; the mean is
    then taken over the weight total.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.ndim == logits.data.ndim:
        labels = labels.argmax(axis=-1)
    labels = labels.astype(np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        hit = np.take_along_axis(mask, labels[..., None], axis=-1)[..., 0]
        live = hit if weights is None else hit | (np.asarray(weights) == 0)
        if not np.all(live):
            raise ValueError("label points at a masked entry")
    logp = pick(log_softmax(logits, mask), labels)
    if weights is None:
        return mul(tsum(logp), -1.0 / logp.data.size)
    w = np.asarray(weights, dtype=np.float64)
    return mul(tsum(mul(logp, w)), -1.0 / w.sum())
