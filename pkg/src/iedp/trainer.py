"""Dual-branch, weight-shared training.

Each step runs the implicit branch (image -> adapter -> UNet -> head) and the
explicit branch (label prompt -> text tower -> UNet -> head) through the same
UNet and head objects, sums the two losses and takes one AdamW step.
Inference uses the implicit branch alone.
"""
from __future__ import annotations

import builtins
import contextlib
import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .encoders import DualEncoder, LatentEncoder, encode_image_clip, encode_latent, encode_text_clip
from .heads import DepthHead, SegHead, cross_entropy_loss, scale_invariant_loss, total_loss
from .optim import AdamW, ScheduleError, adamw_step, poly_lr  # noqa: F401  (re-exported)
from .prompts import ExplicitPromptModule, ImplicitPromptModule, MLPPromptModule, build_prompt
from .synth import PALETTE
from .unet import UNet, UNetConfig

log = logging.getLogger(__name__)

TASKS = ("segmentation", "depth")
ADAPTERS = ("learnable_queries", "mlp_only")
EXPLICIT_SOURCES = ("ground_truth_labels", "generated_captions")
FROZEN_PREFIXES = ("latent.", "clip.")


class LabelLeakError(AssertionError):
    """Ground-truth annotations were touched on the inference path."""


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    poly_power: float = 0.9
    weight_decay: float = 1e-3
    max_iters: int = 2000
    batch_size: int = 8
    seed: int = 0
    task: str = "segmentation"
    nq: int = 256
    position_embeddings: bool = True
    adapter_kind: str = "learnable_queries"
    explicit_source: str = "ground_truth_labels"
    explicit_branch_enabled: bool = True
    implicit_branch_enabled: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    si_lambda: float = 0.5
    d_cond: int = 64
    unet_channels: tuple = (32, 64, 96, 128)
    decoder_width: int = 32
    checkpoint_every: int = 500

    def validate(self):
        errors = []
        if self.task not in TASKS:
            errors.append(f"task must be one of {TASKS}, got {self.task!r}")
        if self.adapter_kind not in ADAPTERS:
            errors.append(f"adapter_kind must be one of {ADAPTERS}, got {self.adapter_kind!r}")
        if self.explicit_source not in EXPLICIT_SOURCES:
            errors.append(f"explicit_source must be one of {EXPLICIT_SOURCES}, got {self.explicit_source!r}")
        if self.max_iters < 1:
            errors.append("max_iters must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.nq < 1:
            errors.append("nq must be >= 1")
        if self.base_lr <= 0:
            errors.append("base_lr must be positive")
        if not 0 < self.poly_power:
            errors.append("poly_power must be positive")
        if len(self.unet_channels) != 4:
            errors.append("unet_channels needs four widths")
        if errors:
            raise ValueError("; ".join(errors))
        return self


# ------------------------------------------------------------------ model --

class IEDPModel:
    """Frozen encoders, both prompt modules, the UNet and one task head.

    Parameter names carry the owning component as prefix: ``latent.``,
    ``clip.`` (both frozen), ``adapter.``, ``explicit.``, ``unet.``, ``head.``.
    """

    def __init__(self, config, dual, latent=None, palette=PALETTE):
        self.config = config.validate()
        self.palette = tuple(palette)
        self.dual = dual.freeze()
        self.latent = latent or LatentEncoder()
        seed = config.seed
        d = dual.d
        if config.adapter_kind == "learnable_queries":
            self.adapter = ImplicitPromptModule(
                d, config.d_cond, config.nq, dual.image.num_patches, position_embeddings=config.position_embeddings, seed=seed
            )
        else:
            self.adapter = MLPPromptModule(d, config.d_cond, config.nq, seed=seed)
        self.explicit = ExplicitPromptModule(d, config.d_cond, config.nq, seed=seed)
        ucfg = UNetConfig(latent_channels=self.latent.channels, channels=tuple(config.unet_channels), d_cond=config.d_cond)
        self.unet = UNet(ucfg, seed=seed)
        if config.task == "segmentation":
            self.head = SegHead(ucfg.channels, config.nq, len(self.palette), config.decoder_width, seed=seed)
        else:
            self.head = DepthHead(ucfg.channels, config.nq, config.decoder_width, seed=seed)
        self._assign_names()
        self._unaligned = None

    def components(self):
        out = {"latent": self.latent, "clip": self.dual, "adapter": self.adapter, "unet": self.unet, "head": self.head}
        if self.explicit is not None:
            out["explicit"] = self.explicit
        return out

    def _assign_names(self):
        for prefix, m in self.components().items():
            m.assign_names(prefix + ".")

    def named_parameters(self):
        for prefix, m in self.components().items():
            yield from m.named_parameters(prefix + ".")

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(FROZEN_PREFIXES) and not p.frozen]

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters() if not n.startswith(FROZEN_PREFIXES)}

    def load_state_dict(self, state):
        for prefix, m in self.components().items():
            if prefix in ("latent", "clip"):
                continue
            m.load_state_dict(state, prefix=prefix + ".")

    def astype(self, dtype):
        for m in self.components().values():
            m.astype(dtype)
        self._unaligned = None
        return self

    def zero_grad(self):
        for m in self.components().values():
            m.zero_grad()

    # -- conditioning --------------------------------------------------------
    def implicit_cond(self, patch_features):
        return self.adapter(patch_features)

    def explicit_cond(self, token_features):
        return self.explicit(token_features)

    def unaligned_prompt(self):
        return build_prompt(self.palette, self.palette).text

    def unaligned_cond(self):
        """Every dataset class as one fixed prompt, shared by all images."""
        if self._unaligned is None:
            feats, _, mask = encode_text_clip(self.dual, self.unaligned_prompt())
            self._unaligned = feats[mask].astype(self.unet.conv_in.weight.dtype)
        return self.explicit(self._unaligned)

    def predict(self, z0, cond):
        return self.head(self.unet(z0, cond))


# ------------------------------------------------------------- features --

@dataclass
class PreparedData:
    """Frozen-encoder outputs cached per sample; targets kept alongside."""

    z0: np.ndarray
    patches: np.ndarray
    prompts: list
    text_tokens: dict
    masks: np.ndarray = None
    depths: np.ndarray = None
    images: np.ndarray = None

    def __len__(self):
        return len(self.z0)


def explicit_text(sample, config, palette=PALETTE, warnings=None):
    if config.explicit_source == "generated_captions" or config.task == "depth":
        return sample.caption
    return build_prompt(sample.classes, palette, warnings=warnings).text


def prepare(samples, model, chunk=64):
    """Run the frozen encoders once over ``samples``."""
    dt = model.unet.conv_in.weight.dtype
    images = np.stack([s.image for s in samples]).astype(dt)
    z0, patches = [], []
    for i in range(0, len(images), chunk):
        z0.append(encode_latent(model.latent, images[i : i + chunk]))
        patches.append(encode_image_clip(model.dual, images[i : i + chunk])[0])
    prompts = [explicit_text(s, model.config, model.palette) for s in samples]
    tokens = {}
    for p in prompts:
        if p not in tokens:
            feats, _, mask = encode_text_clip(model.dual, p)
            tokens[p] = feats[mask].astype(dt)
    return PreparedData(
        z0=np.concatenate(z0).astype(dt),
        patches=np.concatenate(patches).astype(dt),
        prompts=prompts,
        text_tokens=tokens,
        masks=np.stack([s.mask for s in samples]),
        depths=np.stack([s.depth for s in samples]),
        images=images,
    )


def batch_indices(seed, it, n, batch_size):
    """Batch for iteration ``it``; depends only on (seed, it) so resumed runs match."""
    rng = np.random.default_rng([seed, it])
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))


# ------------------------------------------------------------------ step --

def task_loss(model, out, data, idx):
    if model.config.task == "segmentation":
        return cross_entropy_loss(out, data.masks[idx])
    depth = data.depths[idx][:, None]
    return scale_invariant_loss(out, depth, depth > 0, lam=model.config.si_lambda)


def branch_conds(model, data, idx):
    """Conditioning for the implicit (or unaligned) and explicit branches."""
    cfg = model.config
    if cfg.implicit_branch_enabled:
        cond_imp = model.implicit_cond(data.patches[idx])
    else:
        cond_imp = model.unaligned_cond()
    cond_exp = None
    if cfg.explicit_branch_enabled:
        cond_exp = model.explicit_cond([data.text_tokens[data.prompts[i]] for i in idx])
    for c in (cond_imp, cond_exp):
        if c is not None and c.vectors.shape[-2:] != (cfg.nq, cfg.d_cond):
            raise AssertionError(f"{c.source} stream has shape {c.vectors.shape}, expected (.., {cfg.nq}, {cfg.d_cond})")
    return cond_imp, cond_exp


def joint_step(model, data, idx, optimizer=None, lr=None, conds=None):
    """One weight-shared step. Returns the LossReport (backward already run)."""
    z0 = data.z0[idx]
    cond_imp, cond_exp = conds if conds is not None else branch_conds(model, data, idx)
    l_imp = task_loss(model, model.predict(z0, cond_imp), data, idx)
    l_exp = task_loss(model, model.predict(z0, cond_exp), data, idx) if cond_exp is not None else None
    report = total_loss(l_imp, l_exp)
    report.l_total.backward()
    if optimizer is not None:
        adamw_step(optimizer, lr)
    return report


def reachable_parameters(loss):
    """Parameter leaves reachable from ``loss`` in the recorded graph."""
    from .nn import Parameter

    seen, out, stack = set(), {}, [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, Parameter):
            out[node.name] = node
        stack.extend(node._parents)
    return out


# --------------------------------------------------------------- training --

@dataclass
class TrainResult:
    model: IEDPModel
    losses: list = field(default_factory=list)  # (iter, lr, l_imp, l_exp, l_total)
    seconds: float = 0.0
    run_dir: Path = None


def _latest_checkpoint(run_dir):
    ckpts = sorted(Path(run_dir).glob("ckpt_*.bin"))
    return ckpts[-1] if ckpts else None


def save_training_checkpoint(path, model, optimizer, it):
    state = dict(model.state_dict())
    state.update(optimizer.state())
    state["meta.iter"] = np.array([it], dtype=np.float32)
    checkpoint.save(path, state)


def train(config, data, dual, run_dir=None, resume=False, stop_after=None, latent=None, palette=PALETTE):
    """Train a model on prepared data; with ``run_dir`` write loss CSV and
    checkpoints there. ``stop_after`` halts early (used to exercise resume)."""
    config.validate()
    model = IEDPModel(config, dual, latent, palette)
    if data is not None and not isinstance(data, PreparedData):
        data = prepare(data, model)
    opt = AdamW(model.trainable_parameters(), betas=(config.beta1, config.beta2), eps=config.eps, weight_decay=config.weight_decay)
    start = 0
    rows = []
    csv_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        csv_path = run_dir / "loss.csv"
        latest = _latest_checkpoint(run_dir) if resume else None
        if latest is not None:
            state = checkpoint.load(latest)
            model.load_state_dict(state)
            opt.load_state(state)
            start = int(state["meta.iter"][0]) + 1
            with open(csv_path, newline="") as fh:
                rows = [r for r in list(csv.reader(fh))[1:] if int(r[0]) < start]
            log.info("resumed from %s at iteration %d", latest.name, start)
        else:
            (run_dir / "config.txt").write_text(format_config(config))
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "lr", "L_imp", "L_exp", "L_total"])
            w.writerows(rows)
    losses = [(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in rows]
    t0 = time.perf_counter()
    fh = open(csv_path, "a", newline="") if csv_path else None
    try:
        writer = csv.writer(fh) if fh else None
        for it in range(start, config.max_iters):
            lr = poly_lr(it, config.base_lr, config.max_iters, config.poly_power)
            idx = batch_indices(config.seed, it, len(data), config.batch_size)
            opt.zero_grad()
            rep = joint_step(model, data, idx, opt, lr)
            vals = rep.values()
            losses.append((it, lr) + vals)
            if writer:
                writer.writerow([it, repr(lr)] + [repr(v) for v in vals])
            if run_dir is not None and ((it + 1) % config.checkpoint_every == 0 or it + 1 == config.max_iters):
                fh.flush()
                save_training_checkpoint(run_dir / f"ckpt_{it + 1:07d}.bin", model, opt, it)
            if stop_after is not None and it + 1 >= stop_after:
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(model, losses, time.perf_counter() - t0, run_dir)


# -------------------------------------------------------------- inference --

class _GuardState:
    active = False
    forbidden = frozenset()
    attempts = 0


@contextlib.contextmanager
def label_guard(forbidden_paths=()):
    """Fail loudly if any ground-truth file is opened inside the block."""
    forbidden = frozenset(os.path.realpath(p) for p in forbidden_paths)
    real_open, real_io_open = builtins.open, io.open

    def guarded(file, *args, **kwargs):
        if isinstance(file, (str, bytes, os.PathLike)) and os.path.realpath(os.fsdecode(file)) in forbidden:
            _GuardState.attempts += 1
            raise LabelLeakError(f"label file opened during inference: {os.fsdecode(file)}")
        return real_open(file, *args, **kwargs)

    prev = (_GuardState.active, _GuardState.forbidden)
    _GuardState.active, _GuardState.forbidden = True, forbidden | prev[1]
    builtins.open = io.open = guarded
    try:
        yield _GuardState
    finally:
        builtins.open, io.open = real_open, real_io_open
        _GuardState.active, _GuardState.forbidden = prev


def guard_active():
    return _GuardState.active


def inference_forward(model, images):
    """Implicit-branch prediction for image(s) (3, H, W) or (B, 3, H, W).

    Segmentation returns logits (B, C, H, W); depth returns (B, H, W).
    No label or prompt text is consulted.
    """
    images = np.asarray(images, dtype=model.unet.conv_in.weight.dtype)
    single = images.ndim == 3
    if single:
        images = images[None]
    with T.no_grad():
        z0 = encode_latent(model.latent, images)
        if model.config.implicit_branch_enabled:
            cond = model.implicit_cond(encode_image_clip(model.dual, images)[0])
        else:
            cond = model.unaligned_cond()
        out = model.predict(z0, cond).data
    if model.config.task == "depth":
        out = out[:, 0]
    return out[0] if single else out


# ---------------------------------------------------------------- config --

def _parse_value(kind, raw):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is tuple:
        return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    return kind(raw)


def config_types(cls):
    return {f.name: (type(f.default) if f.default is not None else str) for f in fields(cls)}


def format_config(config):
    lines = []
    for k, v in asdict(config).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def save_metrics(path, metrics):
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True))
