"""Parameters, modules and the small set of layers the models are built from."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf. ``frozen`` parameters are skipped by the optimizer."""

    __slots__ = ("frozen", "name")

    def __init__(self, data, frozen=False, name=""):
        super().__init__(data, requires_grad=True)
        self.frozen = frozen
        self.name = name


class Module:
    """Container that discovers parameters and submodules from its attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
            self._modules.pop(key, None)
        elif isinstance(value, Module):
            self._modules[key] = value
            self._params.pop(key, None)
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix=""):
        seen = set()
        for name, p in self._named(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _named(self, prefix):
        for key, p in self._params.items():
            yield prefix + key, p
        for key, m in self._modules.items():
            yield from m._named(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def freeze(self):
        for p in self.parameters():
            p.frozen = True
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Convert every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self, prefix=""):
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix="", strict=True):
        own = dict(self.named_parameters(prefix))
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise T.DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
                p.data = arr.astype(p.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m):
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, bound, (d_in, d_out)))
        self.bias = Parameter(_uniform(rng, bound, (d_out,))) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        super().__init__()
        dt = T.get_default_dtype()
        self.gain = Parameter(np.ones(d, dtype=dt))
        self.bias = Parameter(np.zeros(d, dtype=dt))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, k, k)))
        self.bias = Parameter(_uniform(rng, bound, (c_out,)))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class FeedForward(Module):
    def __init__(self, d, hidden, rng):
        super().__init__()
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def forward(self, x):
        return self.fc2(T.silu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention with separate query and key/value input widths.

    ``forward`` returns the projected output and the head-averaged weight map
    of shape (..., Lq, Lk). Optional position embeddings are added to the
    query and key inputs only (values stay content-only).
    """

    def __init__(self, d_q, d_kv, d_model, n_heads, rng, d_out=None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.w_q = Linear(d_q, d_model, rng, bias=False)
        self.w_k = Linear(d_kv, d_model, rng, bias=False)
        self.w_v = Linear(d_kv, d_model, rng, bias=False)
        self.w_o = Linear(d_model, d_out or d_q, rng)

    def _split(self, x):
        *lead, L, d = x.shape
        h = self.n_heads
        x = x.reshape(tuple(lead) + (L, h, d // h))
        n = len(lead)
        return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))

    def forward(self, x_q, x_kv, q_pos=None, k_pos=None, bias=None):
        q_in = x_q if q_pos is None else x_q + q_pos
        k_in = x_kv if k_pos is None else x_kv + k_pos
        q = self._split(self.w_q(q_in))
        k = self._split(self.w_k(k_in))
        v = self._split(self.w_v(x_kv))
        if q.ndim != k.ndim:
            # shared (unbatched) queries against batched keys
            q = T.reshape(q, (1,) * (k.ndim - q.ndim) + q.shape)
        out, w = T.attention(q, k, v, bias)
        n = out.ndim - 3
        out = out.transpose(tuple(range(n)) + (n + 1, n, n + 2))
        out = out.reshape(out.shape[:-2] + (out.shape[-2] * out.shape[-1],))
        return self.w_o(out), w.mean(axis=-3)
