"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same summation order, so the two
paths agree bit-for-bit. Set ``IEDP_DISABLE_NUMBA=1`` to force the numpy path.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_disabled = os.environ.get("IEDP_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


BACKEND = "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------- im2col ----

@njit(cache=True)
def _im2col_nb(x, kh, kw, stride, out_h, out_w):
    B, C, _, _ = x.shape
    L = out_h * out_w
    cols = np.empty((C * kh * kw, B * L), dtype=x.dtype)
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for b in range(B):
                    for oy in range(out_h):
                        iy = oy * stride + i
                        base = b * L + oy * out_w
                        for ox in range(out_w):
                            cols[row, base + ox] = x[b, c, iy, ox * stride + j]
    return cols


def _im2col_np(x, kh, kw, stride, out_h, out_w):
    B, C = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (out_h - 1) * stride + 1 : stride, : (out_w - 1) * stride + 1 : stride]
    # (B, C, oh, ow, kh, kw) -> (C, kh, kw, B, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * out_h * out_w)


@njit(cache=True)
def _col2im_nb(cols, B, C, H, W, kh, kw, stride, out_h, out_w):
    L = out_h * out_w
    dx = np.zeros((B, C, H, W), dtype=cols.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for oy in range(out_h):
                        iy = oy * stride + i
                        base = b * L + oy * out_w
                        for ox in range(out_w):
                            dx[b, c, iy, ox * stride + j] += cols[row, base + ox]
    return dx


def _col2im_np(cols, B, C, H, W, kh, kw, stride, out_h, out_w):
    dx = np.zeros((B, C, H, W), dtype=cols.dtype)
    c6 = cols.reshape(C, kh, kw, B, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += c6[:, i, j].transpose(1, 0, 2, 3)
    return dx


def im2col(x, kh, kw, stride, out_h, out_w):
    """Unfold a padded (B, C, H, W) array into a (C*kh*kw, B*out_h*out_w) patch matrix."""
    x = np.ascontiguousarray(x)
    if HAS_NUMBA:
        return _im2col_nb(x, kh, kw, stride, out_h, out_w)
    return _im2col_np(x, kh, kw, stride, out_h, out_w)


def col2im(cols, B, C, H, W, kh, kw, stride, out_h, out_w):
    """Adjoint of :func:`im2col`: scatter-add patches back onto a (B, C, H, W) grid."""
    cols = np.ascontiguousarray(cols)
    if HAS_NUMBA:
        return _col2im_nb(cols, B, C, H, W, kh, kw, stride, out_h, out_w)
    return _col2im_np(cols, B, C, H, W, kh, kw, stride, out_h, out_w)


# ------------------------------------------------------------- confusion ----

@njit(cache=True)
def _confusion_nb(gt, pred, num_classes, ignore):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for n in range(gt.shape[0]):
        g = gt[n]
        if g == ignore:
            continue
        cm[g, pred[n]] += 1
    return cm


def _confusion_np(gt, pred, num_classes, ignore):
    keep = gt != ignore
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def confusion_counts(gt, pred, num_classes, ignore=255):
    """Counts of (ground truth, prediction) pairs, ignore-label pixels skipped."""
    gt = np.ascontiguousarray(gt, dtype=np.int64).ravel()
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {gt.shape} vs pred {pred.shape}")
    valid = gt != ignore
    if np.any((gt[valid] < 0) | (gt[valid] >= num_classes)):
        raise ValueError("ground-truth label out of range")
    if np.any((pred[valid] < 0) | (pred[valid] >= num_classes)):
        raise ValueError("predicted label out of range")
    if HAS_NUMBA:
        return _confusion_nb(gt, pred, num_classes, ignore)
    return _confusion_np(gt, pred, num_classes, ignore)


# ---------------------------------------------------------- rasterizing ----

@njit(cache=True)
def _zbuffer_nb(inside, depths, classes, bg_depth, bg_class):
    n, H, W = inside.shape
    zbuf = np.full((H, W), bg_depth)
    label = np.full((H, W), bg_class, dtype=np.int64)
    for k in range(n):
        for y in range(H):
            for x in range(W):
                if inside[k, y, x] and depths[k, y, x] < zbuf[y, x]:
                    zbuf[y, x] = depths[k, y, x]
                    label[y, x] = classes[k]
    return zbuf, label


def _zbuffer_np(inside, depths, classes, bg_depth, bg_class):
    H, W = inside.shape[1:]
    zbuf = np.full((H, W), bg_depth, dtype=depths.dtype)
    label = np.full((H, W), bg_class, dtype=np.int64)
    for k in range(inside.shape[0]):
        hit = inside[k] & (depths[k] < zbuf)
        zbuf[hit] = depths[k][hit]
        label[hit] = classes[k]
    return zbuf, label


def zbuffer(inside, depths, classes, bg_depth, bg_class):
    """Resolve occlusion: nearest object wins per pixel, background behind all.

    ``inside`` is (n, H, W) bool coverage, ``depths`` the per-object depth planes.
    """
    inside = np.ascontiguousarray(inside, dtype=np.bool_)
    depths = np.ascontiguousarray(depths, dtype=np.float64)
    classes = np.ascontiguousarray(classes, dtype=np.int64)
    if HAS_NUMBA:
        return _zbuffer_nb(inside, depths, classes, float(bg_depth), int(bg_class))
    return _zbuffer_np(inside, depths, classes, float(bg_depth), int(bg_class))


NUMPY_KERNELS = {
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "confusion": _confusion_np,
    "zbuffer": _zbuffer_np,
}
COMPILED_KERNELS = {
    "im2col": _im2col_nb,
    "col2im": _col2im_nb,
    "confusion": _confusion_nb,
    "zbuffer": _zbuffer_nb,
}
