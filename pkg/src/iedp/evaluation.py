"""Segmentation and depth metrics plus the tiled inference protocol."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .synth import IGNORE, worker_count
from .tensor import resize_array

METRIC_KEYS = ("miou_ss", "miou_ms", "rmse", "rel", "log10", "delta1", "delta2", "delta3")
MS_SCALES = (1.0, 1.5)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C), rows = ground truth

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_labels(cls, gt, pred, num_classes, ignore=IGNORE):
        return cls(_kernels.confusion_counts(gt, pred, num_classes, ignore))

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self):
        """Per-class IoU; NaN where the union is empty."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def miou(cm):
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or (counts < 0).any():
        raise ValueError("confusion matrix must be square and nonnegative")
    ious = ConfusionMatrix(counts).iou()
    present = ~np.isnan(ious)
    if not present.any():
        raise UndefinedMetricError("no class has a nonzero union")
    return float(ious[present].mean())


@dataclass
class DepthMetrics:
    rmse: float
    rel: float
    log10: float
    delta1: float
    delta2: float
    delta3: float


def depth_metrics(pred, gt, valid=None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise UndefinedMetricError("empty valid mask")
    p, g = pred[valid], gt[valid]
    if (g <= 0).any() or (p <= 0).any():
        raise ValueError("depths must be positive on valid pixels")
    ratio = np.maximum(g / p, p / g)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rel=float(np.mean(np.abs(p - g) / g)),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


# ------------------------------------------------------------ tiling --

def tile_starts(extent, crop, stride):
    """Window offsets covering ``[0, extent)``; the last window is flush with the edge."""
    if stride < 1 or stride > crop:
        raise ValueError(f"need 1 <= stride <= crop, got stride={stride}, crop={crop}")
    if extent <= crop:
        return [0]
    starts = list(range(0, extent - crop + 1, stride))
    if starts[-1] != extent - crop:
        starts.append(extent - crop)
    return starts


def coverage_map(h, w, crop, stride):
    cov = np.zeros((h, w), dtype=np.int64)
    for y in tile_starts(h, crop, stride):
        for x in tile_starts(w, crop, stride):
            cov[y : y + crop, x : x + crop] += 1
    return cov


def default_stride(crop):
    return int(round(crop * 2 / 3))


def sliding_window_infer(image, predict_fn, crop=64, stride=None, mode="segmentation"):
    """Tile ``image`` (3, H, W), run ``predict_fn`` on each batch of crops and
    average overlapping outputs by coverage.

    ``predict_fn`` maps (n, 3, crop, crop) to (n, C, crop, crop) logits or
    (n, crop, crop) depths. Returns (C, H, W) logits or (H, W) depth.
    """
    if mode not in ("segmentation", "depth"):
        raise ValueError(f"unknown mode {mode!r}")
    stride = default_stride(crop) if stride is None else stride
    image = np.asarray(image)
    _, H, W = image.shape
    ph, pw = max(0, crop - H), max(0, crop - W)
    if ph or pw:
        if ph >= H or pw >= W:
            image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="symmetric")
        else:
            image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    Hp, Wp = image.shape[1:]
    ys, xs = tile_starts(Hp, crop, stride), tile_starts(Wp, crop, stride)
    boxes = [(y, x) for y in ys for x in xs]
    tiles = np.stack([image[:, y : y + crop, x : x + crop] for y, x in boxes])
    out = np.asarray(predict_fn(tiles))
    if len(boxes) == 1 and not (ph or pw):
        return out[0]
    acc = np.zeros(((out.shape[1],) if mode == "segmentation" else ()) + (Hp, Wp), dtype=np.float64)
    cov = np.zeros((Hp, Wp), dtype=np.int64)
    for (y, x), o in zip(boxes, out):
        acc[..., y : y + crop, x : x + crop] += o
        cov[y : y + crop, x : x + crop] += 1
    if (cov == 0).any():
        raise AssertionError("sliding window left pixels uncovered")
    return (acc / cov)[..., :H, :W].astype(out.dtype)


def hflip_tta(image, infer_fn):
    """Mean of the plain pass and the un-flipped pass on the mirrored image."""
    image = np.asarray(image)
    a = np.asarray(infer_fn(image))
    b = np.asarray(infer_fn(image[..., ::-1].copy()))[..., ::-1]
    return (a + b) * 0.5


def multiscale_logits(image, infer_fn, scales=MS_SCALES):
    """Average of logits inferred at each scale, resized back to the input size."""
    _, H, W = image.shape
    acc = None
    for s in scales:
        if s == 1.0:
            out = infer_fn(image)
        else:
            hs, ws = int(round(H * s)), int(round(W * s))
            out = resize_array(infer_fn(resize_array(image, hs, ws)), H, W)
        acc = out.astype(np.float64) if acc is None else acc + out
    return acc / len(scales)


# ------------------------------------------------------- dataset eval --

@dataclass
class Predictions:
    task: str
    outputs: list  # per image: (H, W) label map or depth map
    ms_outputs: list = None


def predict_split(images, predict_fn, task, crop=64, stride=None, tta=None, multiscale=False):
    """Run the inference protocol over a list of images (3, H, W).

    Segmentation: sliding window; argmax of accumulated logits.
    Depth: sliding window with horizontal-flip TTA unless ``tta`` is False.
    """
    tta = task == "depth" if tta is None else tta

    def infer(img):
        out = sliding_window_infer(img, predict_fn, crop, stride, task)
        return out

    def one(img):
        fn = (lambda im: hflip_tta(im, infer)) if tta else infer
        out = fn(img)
        ms = None
        if task == "segmentation":
            if multiscale:
                ms = multiscale_logits(img, fn).argmax(0).astype(np.uint8)
            out = out.argmax(0).astype(np.uint8)
        return out, ms

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, images))
    else:
        results = [one(img) for img in images]
    outs = [r[0] for r in results]
    ms = [r[1] for r in results] if multiscale and task == "segmentation" else None
    return Predictions(task, outs, ms)


def segmentation_report(preds, masks, num_classes):
    cm = ConfusionMatrix.zeros(num_classes)
    for p, g in zip(preds.outputs, masks):
        cm = cm + ConfusionMatrix.from_labels(g, p, num_classes)
    metrics = dict.fromkeys(METRIC_KEYS)
    metrics["miou_ss"] = miou(cm)
    if preds.ms_outputs is not None:
        cm_ms = ConfusionMatrix.zeros(num_classes)
        for p, g in zip(preds.ms_outputs, masks):
            cm_ms = cm_ms + ConfusionMatrix.from_labels(g, p, num_classes)
        metrics["miou_ms"] = miou(cm_ms)
    return metrics, cm


def depth_report(preds, depths):
    pred = np.concatenate([np.ravel(p) for p in preds.outputs])
    gt = np.concatenate([np.ravel(d) for d in depths])
    metrics = dict.fromkeys(METRIC_KEYS)
    metrics.update(asdict(depth_metrics(pred, gt)))
    return metrics


def constant_depth_rmse(depths):
    """RMSE of predicting the split's mean valid depth everywhere (the population std)."""
    gt = np.concatenate([np.ravel(d) for d in depths])
    gt = gt[gt > 0].astype(np.float64)
    return float(np.sqrt(np.mean((gt - gt.mean()) ** 2)))


def write_metrics(path, metrics):
    if set(metrics) != set(METRIC_KEYS):
        raise ValueError(f"metric keys {sorted(metrics)} differ from schema")
    clean = {k: (None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)) for k, v in metrics.items()}
    Path(path).write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")


def write_class_iou(path, cm, palette):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "word", "iou"])
        for i, (word, v) in enumerate(zip(palette, cm.iou())):
            w.writerow([i, word, "" if np.isnan(v) else repr(float(v))])


def palette_colors(num_classes):
    rng = np.random.default_rng(7)
    colors = rng.integers(40, 256, size=(256, 3), dtype=np.uint8)
    colors[IGNORE] = 0
    return colors


def save_label_png(path, labels, num_classes):
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette(palette_colors(num_classes).ravel().tolist())
    im.save(path)


def save_depth_png(path, depth):
    d = np.asarray(depth, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    scaled = np.zeros_like(d) if hi <= lo else (d - lo) / (hi - lo)
    Image.fromarray(np.rint(scaled * 255).astype(np.uint8), mode="L").save(path)
