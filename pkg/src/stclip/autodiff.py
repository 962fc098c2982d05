"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded together with
a closure that maps the output gradient onto input gradients.  ``Tape.gradient``
walks the records in exact reverse order of recording and accumulates
gradients additively.  Outside a tape nothing is recorded, so inference code
pays no bookkeeping cost.

Broadcasting follows numpy rules; every binary op sums its gradient back to the
input's shape.  Set ``STCLIP_DEBUG=1`` to check every forward result for
NaN/Inf.
"""

import math
import os
import threading

import numpy as np

from .errors import NumericError, ShapeError

DEBUG = bool(os.environ.get("STCLIP_DEBUG"))
LAYER_NORM_EPS = 1e-5
LOG_CLAMP = 1e-12

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable operations; use as a context manager."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def gradient(self, target, sources, seed=None):
        """Gradients of ``target`` w.r.t. each source; ``None`` where unreachable."""
        if seed is None:
            if target.data.size != 1:
                raise ShapeError(f"gradient needs a scalar target or a seed, got shape {target.shape}")
            seed = np.ones_like(target.data)
        grads = {id(target): np.asarray(seed, dtype=np.float64)}
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for tensor, gi in zip(inputs, backward(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return [grads.get(id(s)) if s.requires_grad else None for s in sources]


def _result(data, inputs, backward):
    if DEBUG and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by a forward op")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, backward))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, s):
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def tanh(a):
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,))


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation (smooth everywhere, unlike ReLU)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_K * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), backward)


# linear algebra ----------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _result(np.matmul(ad, bd), (a, b), backward)


# reductions and shape ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def mean_rows(a):
    """Mean over the row axis (second to last)."""
    return mean(a, axis=-2)


def reshape(a, shape):
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j):
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, index):
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        z = np.zeros(shape)
        if basic:
            z[index] += g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _result(a.data[index], (a,), backward)


def take_rows(table, indices):
    """Embedding lookup: ``table[indices]`` for an integer array of any shape."""
    indices = np.asarray(indices)
    n = table.shape[0]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"lookup index out of range for table with {n} rows")
    return getitem(table, indices)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(data, tuple(tensors), backward)


# normalisation and attention primitives -------------------------------------------

def layer_norm(x, gamma=None, beta=None, eps=LAYER_NORM_EPS):
    """Layer normalisation over the last axis with optional affine parameters."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = None if gamma is None else gamma.data
    y = xhat if gd is None else xhat * gd
    if beta is not None:
        y = y + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def backward(g):
        gx_hat = g if gd is None else g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        out = [gx]
        if gamma is not None:
            out.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            out.append(_unbroadcast(g, beta.shape))
        return tuple(out)

    return _result(y, inputs, backward)


def _softmax_backward(y, axis):
    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return backward


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), _softmax_backward(y, axis))


def softmax_rows(x):
    return softmax(x, axis=-1)


def masked_softmax(x, mask, axis=-1):
    """Softmax where ``mask`` (True = keep) zeroes excluded entries exactly.

    A row with every entry excluded yields all zeros.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(z - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    return _result(y, (x,), _softmax_backward(y, axis))


def masked_softmax_rows(x, mask):
    return masked_softmax(x, mask, axis=-1)


def log_softmax(x, mask=None, axis=-1):
    """Log-softmax; excluded entries (mask False) come out as exactly 0."""
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    y = np.where(mask, x.data - lse, 0.0)
    p = np.where(mask, np.exp(y), 0.0)

    def backward(g):
        g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward)


def cosine_similarity(a, b, axis=-1):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("cosine_similarity", a, b)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine similarity of a zero-norm vector")
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    cos = dot / (na * nb)

    def backward(g):
        g = np.expand_dims(g, axis)
        ga = g * (bd / (na * nb) - cos * ad / (na * na))
        gb = g * (ad / (na * nb) - cos * bd / (nb * nb))
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(np.squeeze(cos, axis), (a, b), backward)


def cross_entropy(probs, target, axis=-1):
    """``-sum(target * ln p)`` along ``axis``; probabilities clamp at 1e-12."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != probs.shape:
        raise ShapeError(f"cross_entropy: incompatible shapes {probs.shape} and {target.shape}")
    p = probs.data
    clamped = np.maximum(p, LOG_CLAMP)
    loss = -(target * np.log(clamped)).sum(axis=axis)

    def backward(g):
        g = np.expand_dims(g, axis)
        return (np.where(p > LOG_CLAMP, -g * target / clamped, 0.0),)

    return _result(loss, (probs,), backward)


# verification oracle -----------------------------------------------------------

def gradients(scalar_fn, params):
    """Analytic gradients of ``scalar_fn()`` for every trainable parameter.

    ``params`` maps names to tensors.  Parameters with ``requires_grad=False``
    get no entry at all.
    """
    with Tape() as tape:
        out = scalar_fn()
    live = {k: v for k, v in params.items() if v.requires_grad}
    grads = tape.gradient(out, list(live.values()))
    return {k: (np.zeros(v.shape) if g is None else g) for (k, v), g in zip(live.items(), grads)}


def _scalar_value(scalar_fn):
    value = float(np.asarray(scalar_fn().data).reshape(()))
    if not math.isfinite(value):
        raise NumericError("grad_check: non-finite function value")
    return value


def grad_check_report(scalar_fn, params, eps=1e-4, floor=1e-8, order=2):
    """Per-parameter worst relative error between analytic and central differences.

    ``order=2`` is the two-point difference (f(x+e) - f(x-e)) / 2e.  ``order=4``
    uses the five-point stencil, whose O(e^4) truncation lets ``eps`` stay large
    enough that roundoff on a large loss does not swamp small gradient entries.
    ``floor`` bounds the denominator of the relative error from below.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    steps, weights = ((1, -1), (1.0, -1.0)) if order == 2 else ((2, 1, -1, -2), (-1.0, 8.0, -8.0, 1.0))
    scale = 2 * eps if order == 2 else 12 * eps
    analytic = gradients(scalar_fn, params)
    report = {}
    for name, grad in analytic.items():
        flat = params[name].data.reshape(-1)
        g = grad.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            total = 0.0
            for step, w in zip(steps, weights):
                flat[i] = orig + step * eps
                total += w * _scalar_value(scalar_fn)
            flat[i] = orig
            numeric = total / scale
            denom = max(abs(g[i]), abs(numeric), floor)
            worst = max(worst, abs(g[i] - numeric) / denom)
        report[name] = worst
    return report


def grad_check(scalar_fn, params, eps=1e-4, floor=1e-8, order=2):
    """Worst relative error over all trainable parameters (0.0 if none)."""
    return max(grad_check_report(scalar_fn, params, eps, floor, order).values(), default=0.0)
