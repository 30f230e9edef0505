"""Deterministic synthetic scenes with segmentation, depth, class sets and captions.

Each scene is a constant-depth background plus 1-5 flat objects whose depth
varies affinely over the canvas. Occlusion is resolved per pixel by a depth
test, so the mask and the depth map always agree. Objects are shaded by
depth (simple fog), which makes depth recoverable from appearance.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels

log = logging.getLogger(__name__)

IGNORE = 255
DEPTH_MIN, DEPTH_MAX = 0.5, 10.0
DEPTH_SCALE = DEPTH_MAX / 65535.0

PALETTE = ("wall", "floor", "sky", "table", "chair", "lamp")
BACKGROUND_WORDS = ("wall", "floor", "sky")
SHAPES = ("rectangle", "disk", "triangle")
CAPTION_LEAD = ("a", "scene", "with")
CAPTION_JOIN = "and"

# Floor, table and chair form a brown family: tints differ by about three
# jitter standard deviations, so single pixels stay ambiguous while a whole
# image reveals which of them are present.
_BASE_RGB = {
    "wall": (0.78, 0.74, 0.62),
    "floor": (0.50, 0.36, 0.22),
    "sky": (0.45, 0.65, 0.92),
    "table": (0.64, 0.34, 0.22),
    "chair": (0.50, 0.46, 0.24),
    "lamp": (0.92, 0.88, 0.48),
}
_TEXTURE = {  # (frequency in cycles per canvas, orientation) of a faint stripe pattern
    "wall": (6.0, 0.0),
    "floor": (10.0, np.pi / 2),
    "sky": (0.0, 0.0),
    "table": (8.0, 0.0),
    "chair": (8.0, np.pi / 2),
    "lamp": (4.0, np.pi / 4),
}


@dataclass
class SceneObject:
    class_id: int
    shape: str
    center: tuple
    radius: float
    plane: tuple  # (a, b, c): depth = a*u + b*v + c, u and v in [0, 1]
    jitter: tuple


@dataclass
class SceneSpec:
    seed: int
    size: int
    background: int
    background_depth: float
    objects: list = field(default_factory=list)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 class ids, IGNORE for unlabeled
    depth: np.ndarray  # (H, W) float32, strictly positive
    classes: tuple  # class words present, in palette order
    caption: str
    seed: int = -1

    @property
    def class_ids(self):
        return tuple(PALETTE.index(w) for w in self.classes)


def sample_scene(seed, size=64, palette=PALETTE):
    """Draw a scene layout. Seed ``s`` always contains class ``s % len(palette)``
    (stratification, so every class is common over any run of seeds)."""
    if size % 64:
        raise ValueError(f"canvas size must be a multiple of 64, got {size}")
    rng = np.random.default_rng(seed)
    n_cls = len(palette)
    bg_ids = [palette.index(w) for w in BACKGROUND_WORDS if w in palette]
    anchor = seed % n_cls
    background = anchor if anchor in bg_ids else int(rng.choice(bg_ids))
    spec = SceneSpec(seed=seed, size=size, background=background, background_depth=float(rng.uniform(7.5, DEPTH_MAX)))
    candidates = [c for c in range(n_cls) if c != background]
    n_obj = int(rng.integers(1, 6))
    for k in range(n_obj):
        cls = anchor if (k == 0 and anchor != background) else int(rng.choice(candidates))
        spec.objects.append(
            SceneObject(
                class_id=cls,
                shape=str(rng.choice(SHAPES)),
                center=(float(rng.uniform(0.15, 0.85)), float(rng.uniform(0.15, 0.85))),
                radius=float(rng.uniform(0.12, 0.3)),
                plane=(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(1.5, 5.5))),
                jitter=tuple(float(j) for j in rng.normal(0.0, 0.035, size=3)),
            )
        )
    return spec


def _coverage(obj, u, v):
    cu, cv = obj.center
    r = obj.radius
    if obj.shape == "rectangle":
        return (np.abs(u - cu) <= r) & (np.abs(v - cv) <= 0.7 * r)
    if obj.shape == "disk":
        return (u - cu) ** 2 + (v - cv) ** 2 <= r * r
    # upward triangle with apex at (cu, cv - r)
    top = cv - r
    t = (v - top) / (2 * r)
    return (t >= 0) & (t <= 1) & (np.abs(u - cu) <= t * r)


def _texture(word, u, v):
    freq, theta = _TEXTURE[word]
    if freq == 0:
        return np.zeros_like(u)
    return np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)))


def render(spec, palette=PALETTE):
    """Rasterize a :class:`SceneSpec` into a :class:`Sample`."""
    S = spec.size
    ax = (np.arange(S) + 0.5) / S
    u, v = np.meshgrid(ax, ax)  # u: column coordinate, v: row coordinate
    n = len(spec.objects)
    inside = np.zeros((n, S, S), dtype=bool)
    planes = np.zeros((n, S, S))
    for k, obj in enumerate(spec.objects):
        inside[k] = _coverage(obj, u, v)
        a, b, c = obj.plane
        planes[k] = np.clip(a * u + b * v + c, DEPTH_MIN, DEPTH_MAX)
    classes = np.array([o.class_id for o in spec.objects], dtype=np.int64)
    depth, label = _kernels.zbuffer(inside, planes, classes, spec.background_depth, spec.background)
    # which object (or -1 for background) is visible; drives per-object colour jitter
    owner = np.full((S, S), -1, dtype=np.int64)
    best = np.full((S, S), np.inf)
    for k in range(n):
        hit = inside[k] & (planes[k] < best) & (planes[k] < spec.background_depth)
        owner[hit] = k
        best[hit] = planes[k][hit]

    rng = np.random.default_rng([spec.seed, 1])
    img = np.zeros((3, S, S))
    for cid in np.unique(label):
        word = palette[cid]
        sel = label == cid
        base = np.array(_BASE_RGB[word])[:, None]
        tex = _texture(word, u[sel], v[sel])
        img[:, sel] = base * (1.0 + 0.08 * tex)
    for k, obj in enumerate(spec.objects):
        sel = owner == k
        img[:, sel] += np.array(obj.jitter)[:, None]
    fog = 1.0 - 0.055 * depth
    img = img * fog + 0.25 * (1.0 - fog)
    img += rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    present = sorted(int(c) for c in np.unique(label))
    words = tuple(palette[c] for c in present)
    areas = {palette[c]: int((label == c).sum()) for c in present}
    return Sample(
        image=img,
        mask=label.astype(np.uint8),
        depth=depth.astype(np.float32),
        classes=words,
        caption=make_caption(words, areas),
        seed=spec.seed,
    )


def make_caption(words, areas=None):
    """Caption listing each present class once, most visible first."""
    if areas is not None:
        words = sorted(words, key=lambda w: (-areas[w], PALETTE.index(w) if w in PALETTE else 0))
    body = f" {CAPTION_JOIN} ".join(words)
    return " ".join(CAPTION_LEAD) + " " + body


def generate_sample(seed, palette=PALETTE, size=64):
    return render(sample_scene(seed, size, palette), palette)


def caption_vocabulary(palette=PALETTE):
    return sorted(set(palette) | set(CAPTION_LEAD) | {CAPTION_JOIN})


# ------------------------------------------------------------------ disk ----

def worker_count():
    try:
        return max(1, int(os.environ.get("IEDP_THREADS", "1")))
    except ValueError:
        return 1


def split_sizes(n, fractions):
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    edges = np.rint(np.cumsum([0.0] + fractions) * n).astype(int)
    edges[-1] = n
    return [int(b - a) for a, b in zip(edges[:-1], edges[1:])]


def split_names(k):
    return {1: ["train"], 2: ["train", "val"], 3: ["train", "val", "test"]}.get(k) or [f"split{i}" for i in range(k)]


def _write_one(args):
    i, seed, size, out_dir = args
    s = generate_sample(seed, size=size)
    stem = f"{i:06d}"
    img8 = np.rint(s.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(out_dir / "images" / f"{stem}.png")
    Image.fromarray(s.mask, mode="L").save(out_dir / "masks" / f"{stem}.png")
    q = np.clip(np.rint(s.depth / DEPTH_SCALE), 1, 65535).astype(np.uint16)
    Image.fromarray(q).save(out_dir / "depth" / f"{stem}.png")
    return {
        "image": f"images/{stem}.png",
        "mask": f"masks/{stem}.png",
        "depth": f"depth/{stem}.png",
        "depth_scale": DEPTH_SCALE,
        "classes": list(s.classes),
        "caption": s.caption,
    }


def write_dataset(n, out_dir, split_fractions=(0.8, 0.2), size=64, seed=0):
    """Render ``n`` scenes to PNG files plus ``manifest.json``; returns the manifest path."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sizes = split_sizes(n, split_fractions)
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "depth"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    jobs = [(i, seed * 1_000_003 + i, size, out_dir) for i in range(n)]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_write_one, jobs, chunksize=16))
    else:
        entries = [_write_one(j) for j in jobs]
    names = split_names(len(sizes))
    assignment = [name for name, k in zip(names, sizes) for _ in range(k)]
    for e, split in zip(entries, assignment):
        e["split"] = split
    manifest = {
        "samples": entries,
        "palette": [{"id": i, "word": w} for i, w in enumerate(PALETTE)],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    log.info("wrote %d samples to %s (splits %s)", n, out_dir, dict(zip(names, sizes)))
    return path


class Dataset:
    """Reads a manifest. Image access and label access go through separate
    methods so an inference-time guard can forbid the latter."""

    def __init__(self, manifest_path, split=None):
        self.manifest_path = Path(manifest_path)
        if not self.manifest_path.exists():
            raise FileNotFoundError(f"manifest not found: {manifest_path}")
        self.root = self.manifest_path.parent
        self.manifest = json.loads(self.manifest_path.read_text())
        self.palette = tuple(p["word"] for p in sorted(self.manifest["palette"], key=lambda p: p["id"]))
        entries = self.manifest["samples"]
        if split is not None:
            entries = [e for e in entries if e["split"] == split]
            if not entries:
                raise KeyError(f"split {split!r} absent from {manifest_path}")
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    def label_paths(self):
        out = set()
        for e in self.manifest["samples"]:
            out.add(str((self.root / e["mask"]).resolve()))
            out.add(str((self.root / e["depth"]).resolve()))
        return out

    def image(self, i):
        with Image.open(self.root / self.entries[i]["image"]) as im:
            return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()

    def mask(self, i):
        with Image.open(self.root / self.entries[i]["mask"]) as im:
            return np.asarray(im, dtype=np.uint8).copy()

    def depth(self, i):
        e = self.entries[i]
        with Image.open(self.root / e["depth"]) as im:
            q = np.asarray(im).astype(np.float64)
        return (q * e["depth_scale"]).astype(np.float32)

    def sample(self, i):
        e = self.entries[i]
        return Sample(
            image=self.image(i),
            mask=self.mask(i),
            depth=self.depth(i),
            classes=tuple(e["classes"]),
            caption=e["caption"],
        )
