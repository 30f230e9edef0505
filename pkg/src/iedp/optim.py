"""AdamW with decoupled weight decay, and the poly learning-rate schedule."""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


def poly_lr(it, base_lr, max_iters, power=0.9):
    """``base_lr * (1 - it / max_iters) ** power`` for ``0 <= it < max_iters``."""
    if not 0 <= it < max_iters:
        raise ScheduleError(f"iteration {it} outside schedule [0, {max_iters})")
    return base_lr * (1.0 - it / max_iters) ** power


class AdamW:
    """Adam moments with bias correction; weight decay applied directly to the
    weights: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.

    Frozen parameters are never given moment buffers and never move.
    """

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [(n, p) for n, p in named_params if not p.frozen]
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0
        self.skipped = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                self.skipped += 1
                log.warning("non-finite gradient for %s; update skipped", name)
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def state(self):
        out = {"optim.step": np.array([self.t], dtype=np.float32)}
        for n, _ in self.params:
            out[f"optim.m.{n}"] = self.m[n]
            out[f"optim.v.{n}"] = self.v[n]
        return out

    def load_state(self, state):
        self.t = int(state["optim.step"][0])
        for n, p in self.params:
            self.m[n] = np.asarray(state[f"optim.m.{n}"], dtype=p.dtype).copy()
            self.v[n] = np.asarray(state[f"optim.v.{n}"], dtype=p.dtype).copy()


def adamw_step(optimizer, lr):
    optimizer.step(lr)
