"""Flat ``key=value`` run configuration with typed validation.

Every training switch lives in :class:`iedp.trainer.TrainConfig`; a run adds
paths and evaluation settings on top. Unknown keys and malformed values are
collected and reported together before any work starts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .trainer import TrainConfig, _parse_value

NQ_CHOICES = (64, 128, 256)


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunConfig:
    data: str = ""
    encoder_dir: str = ""
    out: str = ""
    train_split: str = "train"
    val_split: str = "val"
    crop: int = 64
    stride: int = 43
    eval_multiscale: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        errors = []
        for key in ("data", "encoder_dir", "out"):
            if not getattr(self, key):
                errors.append(f"{key} is required")
        if self.train.nq not in NQ_CHOICES:
            errors.append(f"nq must be one of {NQ_CHOICES}, got {self.train.nq}")
        if not 1 <= self.stride <= self.crop:
            errors.append(f"need 1 <= stride <= crop, got stride={self.stride}, crop={self.crop}")
        try:
            self.train.validate()
        except ValueError as exc:
            errors.extend(str(exc).split("; "))
        if errors:
            raise ConfigError(errors)
        return self

    def flat(self):
        out = {k: v for k, v in asdict(self).items() if k != "train"}
        out.update(asdict(self.train))
        return out


def _field_types():
    types = {}
    for cls in (RunConfig, TrainConfig):
        for f in fields(cls):
            if f.name == "train":
                continue
            default = f.default
            types[f.name] = type(default) if default is not None else str
    return types


FIELD_TYPES = _field_types()
RUN_KEYS = tuple(f.name for f in fields(RunConfig) if f.name != "train")


def parse_pairs(pairs):
    """``[(key, raw_value)]`` -> RunConfig. All problems are reported at once."""
    errors, run, train = [], {}, {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in FIELD_TYPES:
            errors.append(f"unknown key {key!r}")
            continue
        try:
            value = _parse_value(FIELD_TYPES[key], raw)
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
            continue
        (run if key in RUN_KEYS else train)[key] = value
    cfg = RunConfig(**run, train=TrainConfig(**train))
    if errors:
        try:
            cfg.validate()
        except ConfigError as exc:
            errors.extend(exc.errors)
        raise ConfigError(errors)
    return cfg


def read_pairs(text):
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {n}: expected key=value, got {line!r}"])
        k, v = line.split("=", 1)
        pairs.append((k, v))
    return pairs


def load_run_config(path=None, overrides=()):
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    pairs = read_pairs(Path(path).read_text()) if path else []
    return parse_pairs(list(pairs) + list(overrides))


def format_run_config(cfg):
    lines = []
    for k, v in cfg.flat().items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
