"""Dense float64 tensors with a reverse-mode gradient tape.

Recording only happens inside an active :class:`Tape` and only for
operations that touch at least one ``requires_grad`` tensor, so inference
code runs on plain numpy without bookkeeping::

    with Tape():
        loss = (w * w).sum()
    backward(loss)
"""
from __future__ import annotations

import threading

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations, replayed in reverse."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))
        out._tape = self

    def backward(self, loss):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(rec[0]) for rec in self.records}
        pending = {id(loss): np.ones_like(loss.data)}
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = _acc(loss.grad, pending[id(loss)])
        for out, inputs, fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if id(t) in produced:
                    cur = pending.get(id(t))
                    pending[id(t)] = gi if cur is None else cur + gi
                else:
                    t.grad = _acc(t.grad, gi)
        self.records.clear()


def _acc(cur, g):
    return np.array(g, dtype=np.float64, copy=True) if cur is None else cur + g


def backward(loss):
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    tape = loss._tape
    if tape is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            loss.grad = _acc(loss.grad, np.ones_like(loss.data))
        return
    tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a):
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(x)), overflow-safe."""
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * ad)),))


def gelu(a):
    """GELU, tanh approximation."""
    ad = a.data
    return _make(kernels.gelu_fwd(ad), (a,), lambda g: (kernels.gelu_bwd(ad, g),))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick = ad >= bd
    return _make(np.where(pick, ad, bd), (a, b),
                 lambda g: (_unbroadcast(g * pick, ad.shape),
                            _unbroadcast(g * ~pick, bd.shape)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    pick = ad <= bd
    return _make(np.where(pick, ad, bd), (a, b),
                 lambda g: (_unbroadcast(g * pick, ad.shape),
                            _unbroadcast(g * ~pick, bd.shape)))


# -- reductions and shape ops ----------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(out, (a,), fn)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j):
    return _make(a.data.swapaxes(i, j), (a,), lambda g: (g.swapaxes(i, j),))


def getitem(a, idx):
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)
    return _make(a.data[idx], (a,), fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def take_rows(a, idx):
    """Gather rows along axis -2: ``a[..., idx, :]`` per leading batch entry.

    ``idx`` has shape ``a.shape[:-2] + (k,)`` with unique entries per row.
    """
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape
    ix = idx[..., None]

    def fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, ix, g, axis=-2)
        return (full,)
    return _make(np.take_along_axis(a.data, ix, axis=-2), (a,), fn)


def scatter_rows(a, idx, n):
    """Inverse of :func:`take_rows`: place rows at ``idx`` in ``n`` zero rows."""
    idx = np.asarray(idx, dtype=np.int64)
    ix = idx[..., None]
    out = np.zeros(a.shape[:-2] + (n, a.shape[-1]))
    np.put_along_axis(out, ix, a.data, axis=-2)
    return _make(out, (a,), lambda g: (np.take_along_axis(g, ix, axis=-2),))


# -- linear algebra and normalisation --------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # batched activations times one weight matrix: a single 2-D GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2
        return _make(out, (a, b), fn)
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}") from exc
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape),
                            _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)))


def linear(x, w, b=None):
    """``x @ w + b`` as one op; the bias lands in place on the GEMM output."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if wd.ndim != 2 or xd.ndim < 2 or xd.shape[-1] != wd.shape[0]:
        raise DimensionError(f"linear shape mismatch: {xd.shape} x {wd.shape}")
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is None:
        inputs = (x, w)
    else:
        b = as_tensor(b)
        out += b.data
        inputs = (x, w, b)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = ((g2 @ wd.T).reshape(xd.shape), x2.T @ g2)
        return grads if b is None else grads + (_unbroadcast(g, b.shape),)
    return _make(out.reshape(xd.shape[:-1] + (wd.shape[1],)), inputs, fn)


def softmax_rows(a):
    shape = a.shape
    n = shape[-1]
    y = kernels.softmax_fwd(np.ascontiguousarray(a.data.reshape(-1, n))).reshape(shape)

    def fn(g):
        y2 = y.reshape(-1, n)
        return (kernels.softmax_bwd(y2, np.ascontiguousarray(g.reshape(-1, n))).reshape(shape),)
    return _make(y, (a,), fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    shape = x.shape
    c = shape[-1]
    y, xhat, rstd = kernels.layernorm_fwd(
        np.ascontiguousarray(x.data.reshape(-1, c)), gamma.data, beta.data, float(eps))
    gd = gamma.data

    def fn(g):
        dx, dgamma, dbeta = kernels.layernorm_bwd(
            np.ascontiguousarray(g.reshape(-1, c)), xhat, rstd, gd)
        return dx.reshape(shape), dgamma, dbeta
    return _make(y.reshape(shape), (x, gamma, beta), fn)


def im2col3x3(x):
    """[B,H,W,C] -> [B,H,W,9C] zero-padded 3x3 patches."""
    c = x.shape[-1]
    cols = kernels.im2col3x3(np.ascontiguousarray(x.data))
    return _make(cols, (x,),
                 lambda g: (kernels.col2im3x3(np.ascontiguousarray(g), c),))


# -- initialisation --------------------------------------------------------

def make_rng(seed):
    """Counter-based Philox generator; the only RNG used for parameters."""
    return np.random.Generator(np.random.Philox(int(seed)))


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) redrawn outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def parameter(data):
    return Tensor(data, requires_grad=True)
