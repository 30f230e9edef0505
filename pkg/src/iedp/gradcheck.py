"""Central-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class ParamReport:
    name: str
    rel_err: float
    n_checked: int


@dataclass
class GradcheckReport:
    tol: float
    params: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max((p.rel_err for p in self.params), default=0.0)

    @property
    def passed(self):
        return all(p.rel_err <= self.tol for p in self.params)

    def as_dict(self):
        return {
            "tol": self.tol,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "params": {p.name: {"rel_err": p.rel_err, "n_checked": p.n_checked} for p in self.params},
        }


def relative_error(g_ad, g_fd):
    """max|a - f| / (max|a| + max|f| + 1e-12) over the checked entries."""
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    num = np.max(np.abs(g_ad - g_fd)) if g_ad.size else 0.0
    return float(num / (np.max(np.abs(g_ad), initial=0.0) + np.max(np.abs(g_fd), initial=0.0) + 1e-12))


def finite_diff_check(f, params, h=1e-5, tol=1e-4, max_entries=None, seed=0):
    """Compare autodiff gradients of the scalar ``f()`` with central differences.

    ``params`` is an iterable of ``(name, Parameter)``. Frozen parameters are
    left out of the report. When ``max_entries`` is set, at most that many
    entries per parameter are probed, chosen by a seeded generator.
    """
    params = [(n, p) for n, p in params if not getattr(p, "frozen", False)]
    for _, p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"gradient checks run in 64-bit mode; parameter {_} is {p.data.dtype}")
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("objective is non-finite at the base point")
    loss.backward()

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        g_ad = p.grad.reshape(-1)[idx]
        g_fd = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"non-finite objective while perturbing {name}[{i}]")
                g_fd[j] = (fp - fm) / (2.0 * h)
        if not np.isfinite(g_ad).all():
            raise NonFiniteError(f"non-finite autodiff gradient for {name}")
        report.params.append(ParamReport(name, relative_error(g_ad, g_fd), len(idx)))
    return report
