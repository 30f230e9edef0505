"""Task decoders and losses.

Both decoders take the four UNet taps with ``F_CA`` concatenated onto the
stride-8 tap, merge them FPN-style (lateral 1x1 convs, top-down addition),
fuse at stride 8 and upsample the prediction x8 bilinearly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T

log = logging.getLogger(__name__)

IGNORE = 255


class FPNTrunk(nn.Module):
    def __init__(self, in_channels, width, rng):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.lateral = nn.ModuleList([nn.Conv2d(c, width, 1, rng) for c in in_channels])
        self.smooth = nn.ModuleList([nn.Conv2d(width, width, 3, rng) for _ in in_channels])
        self.fuse = nn.Conv2d(width, width, 3, rng)

    def forward(self, bundle):
        feats = [T.concat([bundle.f1, bundle.f_ca], axis=1), bundle.f2, bundle.f3, bundle.f4]
        for f, c in zip(feats, self.in_channels):
            if f.shape[1] != c:
                raise T.DimensionError(f"decoder expected {c} channels, got {f.shape[1]}")
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        # top-down pathway
        p = lat[3]
        tops = [p]
        for i in (2, 1, 0):
            p = lat[i] + T.upsample_nearest(p, 2)
            tops.append(p)
        tops = tops[::-1]  # stride 8 first
        h8, w8 = tops[0].shape[-2:]
        acc = None
        for i, (p, sm) in enumerate(zip(tops, self.smooth)):
            q = T.silu(sm(p))
            if i:
                q = T.resize_bilinear(q, h8, w8)
            acc = q if acc is None else acc + q
        return T.silu(self.fuse(acc))


def decoder_in_channels(unet_channels, nq):
    c = unet_channels
    return (c[0] + nq, c[1], c[2], c[3])


class SegHead(nn.Module):
    def __init__(self, unet_channels, nq, num_classes, width=32, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed + 101)
        self.trunk = FPNTrunk(decoder_in_channels(unet_channels, nq), width, rng)
        self.classifier = nn.Conv2d(width, num_classes, 1, rng)
        self.num_classes = num_classes

    def forward(self, bundle):
        logits = self.classifier(self.trunk(bundle))
        h, w = logits.shape[-2:]
        return T.resize_bilinear(logits, 8 * h, 8 * w)


class DepthHead(nn.Module):
    """Predicts ``softplus(h) + min_depth``; the SI loss works on its log."""

    def __init__(self, unet_channels, nq, width=32, min_depth=1e-3, init_depth=5.0, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed + 202)
        self.trunk = FPNTrunk(decoder_in_channels(unet_channels, nq), width, rng)
        self.out = nn.Conv2d(width, 1, 3, rng)
        self.out.bias.data[:] = np.log(np.expm1(init_depth))
        self.min_depth = min_depth

    def forward(self, bundle):
        h = self.out(self.trunk(bundle))
        hh, ww = h.shape[-2:]
        h = T.resize_bilinear(h, 8 * hh, 8 * ww)
        return T.softplus(h) + self.min_depth


def seg_decode(head, bundle):
    return head(bundle)


def depth_decode(head, bundle):
    return head(bundle)


def cross_entropy_loss(logits, mask, ignore=IGNORE, warnings=None):
    """Mean NLL over pixels whose label is not ``ignore``.

    ``logits``: (B, C, H, W) or (C, H, W); ``mask``: matching integer labels.
    """
    mask = np.asarray(mask)
    if logits.ndim == 3:
        logits = T.reshape(logits, (1,) + logits.shape)
        mask = mask[None]
    B, C, H, W = logits.shape
    if mask.shape != (B, H, W):
        raise T.DimensionError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    valid = mask != ignore
    n = int(valid.sum())
    if n == 0:
        msg = "all pixels ignored; cross-entropy defined as 0"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return logits.sum() * 0.0
    onehot = np.zeros((B, C, H, W), dtype=logits.dtype)
    b, y, x = np.nonzero(valid)
    onehot[b, mask[valid].astype(np.int64), y, x] = 1.0
    return -(T.log_softmax(logits, axis=1) * onehot).sum() * (1.0 / n)


def scale_invariant_loss(pred, gt, valid=None, lam=0.5, warnings=None):
    """Per image ``mean(g^2) - lam * mean(g)^2`` with ``g = log pred - log gt``
    over valid pixels, averaged over the images that have any valid pixel.

    ``pred`` is (B, 1, H, W) or a single (1, H, W) / (H, W) map.
    """
    gt = np.asarray(gt)
    single = pred.ndim < 4
    B = 1 if single else pred.shape[0]
    gt = gt.reshape(B, -1)
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool).reshape(B, -1)
    counts = valid.sum(axis=1)
    keep = counts > 0
    if not keep.any():
        msg = "empty valid mask; SI loss defined as 0"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        return pred.sum() * 0.0
    p = T.reshape(pred, (B, -1))
    w = valid.astype(pred.dtype)
    safe_gt = np.where(valid, gt, 1.0).astype(pred.dtype)
    inv_n = (1.0 / np.maximum(counts, 1)).astype(pred.dtype)
    g = (T.log(p) - np.log(safe_gt)) * w
    s1 = (g * g).sum(axis=1) * inv_n
    s = g.sum(axis=1) * inv_n
    per_image = s1 - s * s * lam
    return (per_image * keep.astype(pred.dtype)).sum() * (1.0 / int(keep.sum()))


@dataclass
class LossReport:
    l_imp: T.Tensor
    l_exp: T.Tensor
    l_total: T.Tensor

    def values(self):
        return float(self.l_imp.data), float(self.l_exp.data), float(self.l_total.data)


def total_loss(l_imp, l_exp):
    if l_exp is None:
        l_exp = T.Tensor(np.zeros((), dtype=l_imp.dtype))
    return LossReport(l_imp, l_exp, l_imp + l_exp)
