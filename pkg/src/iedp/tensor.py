"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a closure computing the vector-Jacobian product for each
parent; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order and accumulates gradients additively into leaves.
"""
from __future__ import annotations

import contextlib
import math
from functools import lru_cache

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_state = {"dtype": np.float32, "grad": True}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (e.g. float64 for gradient checks)."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled():
    return _state["grad"]


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    return np.asarray(data, dtype=get_default_dtype())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- autodiff ------------------------------------------------------------
    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        topo = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operators -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

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

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _toposort(root):
    topo, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return topo


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_default_dtype()))


def _pair(a, b):
    # constants adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor):
        return a, (b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype)))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _t(a), _t(b)


def _wrap(data, parents, backward):
    if _state["grad"] and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ------------------------------------------------------------- elementwise --

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data
    return _wrap(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data
    return _wrap(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, (a, b), backward)


def power(a, p):
    a = _t(a)
    p = float(p)
    out = a.data ** p
    return _wrap(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = _t(a)
    out = np.exp(a.data)
    return _wrap(out, (a,), lambda g: (g * out,))


def log(a):
    a = _t(a)
    out = np.log(a.data)
    return _wrap(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _t(a)
    out = np.sqrt(a.data)
    return _wrap(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    a = _t(a)
    out = np.tanh(a.data)
    return _wrap(out, (a,), lambda g: (g * (1.0 - out * out),))


def clip_max(a, hi):
    a = _t(a)
    out = np.minimum(a.data, hi)
    return _wrap(out, (a,), lambda g: (g * (a.data <= hi),))


def relu(a):
    a = _t(a)
    out = np.maximum(a.data, 0)
    return _wrap(out, (a,), lambda g: (g * (a.data > 0),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = _t(a)
    out = _sigmoid(a.data)
    return _wrap(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    a = _t(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _wrap(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a):
    a = _t(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    return _wrap(out, (a,), lambda g: (g * _sigmoid(x),))


# -------------------------------------------------------------- reductions --

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _wrap(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _t(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = _t(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    soft = s / tot

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _wrap(out if keepdims else np.squeeze(out, axis), (a,), backward)


# ------------------------------------------------------------ shape ops ----

def reshape(a, shape):
    a = _t(a)
    out = a.data.reshape(shape)
    return _wrap(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _wrap(out, (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    a = _t(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _wrap(np.array(out, copy=True) if not basic else out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _wrap(out, tuple(tensors), backward)


def stack(tensors, axis=0):
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(_t, tensors)], axis=axis)


def broadcast_to(a, shape):
    a = _t(a)
    out = np.broadcast_to(a.data, shape)
    return _wrap(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def tile_rows(a, n):
    """Cyclically repeat rows along axis -2, truncated to exactly ``n`` rows."""
    a = _t(a)
    idx = np.arange(n) % a.shape[-2]
    return getitem(a, (Ellipsis, idx, slice(None)))


# ----------------------------------------------------------------- linalg --

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _wrap(out, (a, b), backward)


# ---------------------------------------------------------- normalization --

def softmax(a, axis=-1):
    a = _t(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _wrap(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = _t(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _wrap(out, (a,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _wrap(out, (x, gain, bias), backward)


# ------------------------------------------------------------ convolution --

def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of x (B, C, H, W) with kernels w (O, C, kh, kw)."""
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernels, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernels {w.shape}")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d kernel {w.shape[2:]} larger than padded input {(Hp, Wp)}")
    out_h = (Hp - kh) // stride + 1
    out_w = (Wp - kw) // stride + 1
    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(C, B * H * W)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _kernels.im2col(xp, kh, kw, stride, out_h, out_w)
    wm = w.data.reshape(O, C * kh * kw)
    out = np.matmul(wm, cols)  # (O, B*L)
    parents = (x, w)
    if b is not None:
        b = _t(b)
        out += b.data[:, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(out.reshape(O, B, out_h, out_w).transpose(1, 0, 2, 3))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * out_h * out_w)
        gx = gw = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm)
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(C, B, H, W).transpose(1, 0, 2, 3))
            else:
                dx = _kernels.col2im(dcols, B, C, Hp, Wp, kh, kw, stride, out_h, out_w)
                gx = dx[:, :, padding : padding + H, padding : padding + W] if padding else dx
        if w.requires_grad:
            gw = np.matmul(gm, cols.T).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1) if b.requires_grad else None

    return _wrap(out, parents, backward)


def upsample_nearest(x, factor=2):
    x = _t(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return _wrap(out, (x,), backward)


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in, n_out, dtype_name):
    """Interpolation matrix (n_out, n_in), half-pixel centers, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    m = m.astype(dtype_name)
    m.setflags(write=False)
    return m


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize over the last two axes. Rows of the interpolation
    matrices sum to one, so stochastic maps stay stochastic."""
    x = _t(x)
    H, W = x.shape[-2:]
    dt = x.dtype.name
    ry = _bilinear_matrix(H, out_h, dt)
    rx = _bilinear_matrix(W, out_w, dt)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _wrap(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


def resize_array(a, out_h, out_w):
    """Non-differentiable bilinear resize of a numpy array over its last two axes."""
    ry = _bilinear_matrix(a.shape[-2], out_h, a.dtype.name if a.dtype.kind == "f" else "float64")
    rx = _bilinear_matrix(a.shape[-1], out_w, ry.dtype.name)
    return np.matmul(np.matmul(ry, a), rx.T)


# -------------------------------------------------------------- attention --

def attention(q, k, v, bias=None):
    """Scaled dot-product attention over the last two axes.

    Returns ``(out, weights)``; ``weights`` rows are stochastic over keys.
    ``bias`` is an additive logit mask broadcastable to (..., Lq, Lk).
    """
    q, k, v = _t(q), _t(k), _t(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention width mismatch: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention key/value length mismatch: k {k.shape} vs v {v.shape}")
    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        logits = logits + bias
    weights = softmax(logits, axis=-1)
    return matmul(weights, v), weights
