"""Finite-difference suites over every differentiable op and each model block.

All suites run in float64. Each case builds a fresh objective ``sum(out * R)``
with a fixed random ``R`` so every output entry contributes to the gradient.
Ops are looked up on the tensor module at call time, so a patched backward
rule is what gets checked.
"""
from __future__ import annotations

import time

import numpy as np

from . import heads as H
from . import nn
from . import tensor as T
from .gradcheck import finite_diff_check

SCOPES = ("ops", "adapter", "unet", "heads", "all")


def _param(rng, *shape, low=-1.0, high=1.0):
    return nn.Parameter(rng.uniform(low, high, size=shape).astype(np.float64))


def _away_from(rng, shape, kink, margin=0.2):
    x = rng.uniform(-1.0, 1.0, size=shape)
    x = np.where(np.abs(x - kink) < margin, x + np.sign(x - kink + 1e-12) * margin, x)
    return nn.Parameter(x.astype(np.float64))


def _weighted(out_fn, seed):
    """Objective ``sum(out * R)`` with R drawn once from the first output's shape."""
    cache = {}

    def f():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = np.random.default_rng(seed).normal(size=out.shape)
        return (out * cache["r"]).sum()

    return f


def _op_cases():
    """(name, params, out_fn) for every differentiable primitive."""
    rng = np.random.default_rng(0)
    cases = []

    def add(name, params, fn):
        cases.append((name, params, fn))

    a, b = _param(rng, 3, 4), _param(rng, 4)
    add("add", [("a", a), ("b", b)], lambda: T.add(a, b))
    a2, b2 = _param(rng, 3, 1), _param(rng, 3, 4)
    add("sub", [("a", a2), ("b", b2)], lambda: T.sub(a2, b2))
    a3, b3 = _param(rng, 2, 3), _param(rng, 1, 3)
    add("mul", [("a", a3), ("b", b3)], lambda: T.mul(a3, b3))
    a4, b4 = _param(rng, 2, 3), _param(rng, 2, 3, low=0.5, high=2.0)
    add("div", [("a", a4), ("b", b4)], lambda: T.div(a4, b4))
    p = _param(rng, 5, low=0.3, high=2.0)
    add("power", [("x", p)], lambda: T.power(p, 2.5))
    e = _param(rng, 4)
    add("exp", [("x", e)], lambda: T.exp(e))
    lg = _param(rng, 4, low=0.2, high=3.0)
    add("log", [("x", lg)], lambda: T.log(lg))
    sq = _param(rng, 4, low=0.2, high=3.0)
    add("sqrt", [("x", sq)], lambda: T.sqrt(sq))
    th = _param(rng, 4)
    add("tanh", [("x", th)], lambda: T.tanh(th))
    cm = _away_from(rng, (6,), 0.3)
    add("clip_max", [("x", cm)], lambda: T.clip_max(cm, 0.3))
    rl = _away_from(rng, (6,), 0.0)
    add("relu", [("x", rl)], lambda: T.relu(rl))
    sg = _param(rng, 5, low=-4, high=4)
    add("sigmoid", [("x", sg)], lambda: T.sigmoid(sg))
    sl = _param(rng, 5, low=-4, high=4)
    add("silu", [("x", sl)], lambda: T.silu(sl))
    sp = _param(rng, 5, low=-4, high=4)
    add("softplus", [("x", sp)], lambda: T.softplus(sp))
    ts = _param(rng, 2, 3, 4)
    add("tsum", [("x", ts)], lambda: T.tsum(ts, axis=1, keepdims=True))
    mn = _param(rng, 2, 3, 4)
    add("mean", [("x", mn)], lambda: T.mean(mn, axis=(0, 2)))
    ls = _param(rng, 3, 5)
    add("logsumexp", [("x", ls)], lambda: T.logsumexp(ls, axis=-1))
    rs = _param(rng, 2, 6)
    add("reshape", [("x", rs)], lambda: T.reshape(rs, (3, 4)))
    tp = _param(rng, 2, 3, 4)
    add("transpose", [("x", tp)], lambda: T.transpose(tp, (2, 0, 1)))
    gi = _param(rng, 4, 5)
    add("getitem", [("x", gi)], lambda: T.getitem(gi, (slice(1, 3), slice(None, None, 2))))
    gf = _param(rng, 4, 5)
    fancy = np.array([0, 2, 2, 3])
    add("getitem_gather", [("x", gf)], lambda: T.getitem(gf, fancy))
    c1, c2 = _param(rng, 2, 3), _param(rng, 2, 2)
    add("concat", [("a", c1), ("b", c2)], lambda: T.concat([c1, c2], axis=1))
    s1, s2 = _param(rng, 3), _param(rng, 3)
    add("stack", [("a", s1), ("b", s2)], lambda: T.stack([s1, s2], axis=0))
    bt = _param(rng, 1, 3)
    add("broadcast_to", [("x", bt)], lambda: T.broadcast_to(bt, (4, 3)))
    tr = _param(rng, 3, 4)
    add("tile_rows", [("x", tr)], lambda: T.tile_rows(tr, 7))
    m1, m2 = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    add("matmul", [("a", m1), ("b", m2)], lambda: T.matmul(m1, m2))
    sm = _param(rng, 3, 5, low=-2, high=2)
    add("softmax", [("x", sm)], lambda: T.softmax(sm, axis=-1))
    lsm = _param(rng, 3, 5, low=-2, high=2)
    add("log_softmax", [("x", lsm)], lambda: T.log_softmax(lsm, axis=0))
    lx, lgain, lbias = _param(rng, 3, 6), _param(rng, 6, low=0.5, high=1.5), _param(rng, 6)
    add("layer_norm", [("x", lx), ("gain", lgain), ("bias", lbias)], lambda: T.layer_norm(lx, lgain, lbias))
    cx, cw, cb = _param(rng, 2, 3, 6, 6), _param(rng, 4, 3, 3, 3), _param(rng, 4)
    add("conv2d", [("x", cx), ("w", cw), ("b", cb)], lambda: T.conv2d(cx, cw, cb, stride=1, padding=1))
    dx, dw, db = _param(rng, 1, 2, 7, 7), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    add("conv2d_stride2", [("x", dx), ("w", dw), ("b", db)], lambda: T.conv2d(dx, dw, db, stride=2, padding=1))
    px, pw, pb = _param(rng, 2, 3, 4, 4), _param(rng, 5, 3, 1, 1), _param(rng, 5)
    add("conv2d_pointwise", [("x", px), ("w", pw), ("b", pb)], lambda: T.conv2d(px, pw, pb))
    up = _param(rng, 1, 2, 3, 3)
    add("upsample_nearest", [("x", up)], lambda: T.upsample_nearest(up, 2))
    rb = _param(rng, 1, 2, 3, 5)
    add("resize_bilinear", [("x", rb)], lambda: T.resize_bilinear(rb, 7, 4))
    aq, ak, av = _param(rng, 2, 3, 4), _param(rng, 2, 5, 4), _param(rng, 2, 5, 4)
    abias = np.random.default_rng(1).normal(size=(1, 1, 5))
    add("attention", [("q", aq), ("k", ak), ("v", av)], lambda: T.attention(aq, ak, av, abias)[0])
    ce = _param(rng, 2, 4, 3, 3)
    mask = np.random.default_rng(2).integers(0, 4, size=(2, 3, 3)).astype(np.uint8)
    mask[0, 0, 0] = H.IGNORE
    add("cross_entropy", [("logits", ce)], lambda: H.cross_entropy_loss(ce, mask))
    si = _param(rng, 2, 1, 3, 3, low=0.5, high=3.0)
    gt = np.random.default_rng(3).uniform(0.5, 3.0, size=(2, 1, 3, 3))
    add("scale_invariant", [("pred", si)], lambda: H.scale_invariant_loss(si, gt, lam=0.5))
    return cases


def check_ops(h=1e-5, tol=1e-4):
    """Per-op reports as ``{op: GradcheckReport}``."""
    out = {}
    with T.precision(np.float64):
        for i, (name, params, fn) in enumerate(_op_cases()):
            out[name] = finite_diff_check(_weighted(fn, seed=100 + i), params, h=h, tol=tol)
    return out


def _module_report(module, out_fn, h, tol, max_entries, seed):
    module.astype(np.float64)
    return finite_diff_check(_weighted(out_fn, seed), module.named_parameters(), h=h, tol=tol, max_entries=max_entries, seed=seed)


def check_adapter(h=1e-5, tol=1e-4, max_entries=12):
    from .prompts import ImplicitPromptModule

    with T.precision(np.float64):
        mod = ImplicitPromptModule(d_vis=6, d_cond=8, nq=5, n_patches=4, heads=2, seed=3)
        feats = np.random.default_rng(4).normal(size=(2, 4, 6))
        return _module_report(mod, lambda: mod(feats).vectors, h, tol, max_entries, seed=5)


def mini_unet_config():
    from .unet import UNetConfig

    return UNetConfig(latent_channels=2, channels=(4, 4, 6, 6), d_cond=6, attn_dim=4, heads=2, time_dim=4)


def check_unet(h=1e-5, tol=1e-4, max_entries=6):
    from .unet import UNet

    with T.precision(np.float64):
        unet = UNet(mini_unet_config(), seed=6)
        rng = np.random.default_rng(7)
        z0 = rng.normal(size=(1, 2, 8, 8))
        cond = T.Tensor(rng.normal(size=(1, 3, 6)))

        def out():
            b = unet(z0, cond)
            return T.concat([T.reshape(b.f1, (-1,)), T.reshape(b.f2, (-1,)), T.reshape(b.f4, (-1,)), T.reshape(b.f_ca, (-1,))])

        return _module_report(unet, out, h, tol, max_entries, seed=8)


def _mini_bundle(rng, nq, channels):
    from .unet import FeatureBundle

    f = [T.Tensor(rng.normal(size=(1, c, 8 >> i, 8 >> i))) for i, c in enumerate(channels)]
    ca = rng.uniform(size=(1, nq, 8, 8))
    return FeatureBundle(*f, f_ca=T.Tensor(ca / ca.sum(axis=1, keepdims=True)))


def check_heads(h=1e-5, tol=1e-4, max_entries=6):
    reports = {}
    with T.precision(np.float64):
        rng = np.random.default_rng(9)
        channels, nq = (3, 4, 4, 5), 3
        bundle = _mini_bundle(rng, nq, channels)
        seg = H.SegHead(channels, nq, num_classes=4, width=4, seed=1)
        mask = rng.integers(0, 4, size=(1, 64, 64)).astype(np.uint8)
        reports["seg_head"] = _module_report(seg, lambda: H.cross_entropy_loss(seg(bundle), mask)[None], h, tol, max_entries, seed=10)
        dep = H.DepthHead(channels, nq, width=4, seed=2)
        gt = rng.uniform(1.0, 9.0, size=(1, 1, 64, 64))
        reports["depth_head"] = _module_report(dep, lambda: H.scale_invariant_loss(dep(bundle), gt)[None], h, tol, max_entries, seed=11)
    return reports


def run_suite(scope="all", h=1e-5, tol=1e-4):
    """Returns ``(passed, report_dict)``; the report lists max relative error per entry."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    t0 = time.perf_counter()
    reports = {}
    if scope in ("ops", "all"):
        reports.update({f"op.{k}": v for k, v in check_ops(h, tol).items()})
    if scope in ("adapter", "all"):
        reports["adapter"] = check_adapter(h, tol)
    if scope in ("unet", "all"):
        reports["unet"] = check_unet(h, tol)
    if scope in ("heads", "all"):
        reports.update({f"heads.{k}": v for k, v in check_heads(h, tol).items()})
    entries = {k: {"max_rel_err": r.max_rel_err, "passed": r.passed} for k, r in reports.items()}
    failed = sorted(k for k, r in reports.items() if not r.passed)
    out = {
        "scope": scope,
        "h": h,
        "tol": tol,
        "passed": not failed,
        "failed": failed,
        "max_rel_err": max((e["max_rel_err"] for e in entries.values()), default=0.0),
        "seconds": time.perf_counter() - t0,
        "entries": entries,
    }
    return not failed, out
