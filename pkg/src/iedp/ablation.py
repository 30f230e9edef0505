"""Fixed-seed synthetic benchmark comparing training arms.

Every arm trains on the same in-memory split with the same pretrained image/text
towers and is scored with the evaluation protocol on the held-out split. Finished
runs are cached as JSON keyed by a hash of the arm settings and the source of the
modules that influence training, so repeated invocations reuse earlier work.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as E
from .encoders import DualEncoder, PretrainConfig, Vocabulary, contrastive_pretrain, load_dual_encoder, save_dual_encoder
from .synth import PALETTE, caption_vocabulary, generate_sample
from .trainer import IEDPModel, TrainConfig, inference_forward, prepare, train

log = logging.getLogger(__name__)

ARMS = {
    "full": {},
    "implicit_only": {"explicit_branch_enabled": False},
    "unaligned_baseline": {"explicit_branch_enabled": False, "implicit_branch_enabled": False},
    "caption_prompts": {"explicit_source": "generated_captions"},
}

_TRAINING_MODULES = (
    "_kernels", "tensor", "nn", "optim", "encoders", "prompts", "unet", "heads", "trainer", "synth", "evaluation",
)


@dataclass
class Benchmark:
    n_train: int = 1000
    n_val: int = 200
    iters: int = 2000
    pretrain_iters: int = 3000
    seeds: tuple = (0, 1, 2)
    task: str = "segmentation"
    overrides: dict = field(default_factory=dict)

    def samples(self):
        allv = [generate_sample(i) for i in range(self.n_train + self.n_val)]
        return allv[: self.n_train], allv[self.n_train :]


def source_fingerprint():
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for name in _TRAINING_MODULES:
        h.update((pkg / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def _key(payload):
    text = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def pretrained_towers(bench, train_samples, val_samples, cache_dir):
    """Contrastively pretrained towers for this benchmark, cached on disk."""
    key = _key({"pretrain_iters": bench.pretrain_iters, "n_train": bench.n_train, "n_val": bench.n_val, "src": source_fingerprint()})
    d = Path(cache_dir) / f"towers_{key}"
    if (d / "dual.bin").exists():
        return load_dual_encoder(d / "dual.bin", d / "vocab.txt")
    dual = DualEncoder(Vocabulary(caption_vocabulary()), seed=0)
    dual, report = contrastive_pretrain(
        dual,
        np.stack([s.image for s in train_samples]),
        [s.caption for s in train_samples],
        PretrainConfig(iters=bench.pretrain_iters),
        np.stack([s.image for s in val_samples]),
        [s.caption for s in val_samples],
    )
    d.mkdir(parents=True, exist_ok=True)
    save_dual_encoder(dual, d / "dual.bin", d / "vocab.txt")
    (d / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return dual


def score(model, val_samples, task):
    preds = E.predict_split([s.image for s in val_samples], lambda t: inference_forward(model, t), task)
    if task == "segmentation":
        metrics, _ = E.segmentation_report(preds, [s.mask for s in val_samples], len(PALETTE))
    else:
        metrics = E.depth_report(preds, [s.depth for s in val_samples])
        metrics["constant_rmse"] = E.constant_depth_rmse([s.depth for s in val_samples])
    return metrics


def _arm_config(bench, arm, seed):
    return replace(TrainConfig(max_iters=bench.iters, seed=seed, task=bench.task, **bench.overrides), **ARMS[arm])


def _record_path(bench, arm, seed, cache_dir):
    cfg = _arm_config(bench, arm, seed)
    payload = {"bench": {k: v for k, v in asdict(bench).items() if k != "seeds"}, "train": asdict(cfg), "src": source_fingerprint()}
    return Path(cache_dir) / f"{arm}_s{seed}_{_key(payload)}.json", cfg, payload


def run_arm(bench, arm, seed, cache_dir, _shared=None):
    """Train and score one (arm, seed); returns the cached record if present."""
    path, cfg, payload = _record_path(bench, arm, seed, cache_dir)
    if path.exists():
        return json.loads(path.read_text())
    tr, va, dual = _shared if _shared else _setup(bench, cache_dir)
    t0 = time.perf_counter()
    model = IEDPModel(cfg, dual)
    result = train(cfg, prepare(tr, model), dual)
    record = {"arm": arm, "seed": seed, "metrics": score(result.model, va, bench.task),
              "final_losses": list(result.losses[-1][2:]), "seconds": time.perf_counter() - t0, "config": payload}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=list) + "\n")
    log.info("%s seed %d: %s in %.0fs", arm, seed, record["metrics"], record["seconds"])
    return record


def _setup(bench, cache_dir):
    tr, va = bench.samples()
    return tr, va, pretrained_towers(bench, tr, va, cache_dir)


def run_arms(bench, arms, cache_dir):
    """Records for every arm and seed, as ``{arm: [record per seed]}``."""
    shared = None
    out = {}
    for arm in arms:
        out[arm] = []
        for seed in bench.seeds:
            if shared is None and not _record_path(bench, arm, seed, cache_dir)[0].exists():
                shared = _setup(bench, cache_dir)
            out[arm].append(run_arm(bench, arm, seed, cache_dir, shared))
    return out


def mean_metric(records, key):
    return float(np.mean([r["metrics"][key] for r in records]))
