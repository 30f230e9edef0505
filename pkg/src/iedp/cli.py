"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 verification failure (gradient suite, leak guard).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
FORCE_LABEL_READ_ENV = "IEDP_TEST_FORCE_LABEL_READ"

log = logging.getLogger("iedp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _apply_thread_cap():
    n = os.environ.get("IEDP_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, n)


# ------------------------------------------------------------ commands --

def cmd_gen_data(args):
    from .synth import write_dataset

    fractions = tuple(float(x) for x in args.splits.split(","))
    path = write_dataset(args.n, args.out, fractions, size=args.size, seed=args.seed)
    print(path)
    return EXIT_OK


def cmd_pretrain_encoders(args):
    from .encoders import DualEncoder, PretrainConfig, Vocabulary, contrastive_pretrain, save_dual_encoder
    from .synth import Dataset, caption_vocabulary

    train = Dataset(args.data, split=args.split)
    try:
        held = Dataset(args.data, split=args.eval_split)
    except KeyError:
        held = train
    images = np.stack([train.image(i) for i in range(len(train))])
    captions = [e["caption"] for e in train.entries]
    eval_images = np.stack([held.image(i) for i in range(len(held))])
    eval_captions = [e["caption"] for e in held.entries]
    vocab = Vocabulary(caption_vocabulary(train.palette))
    dual = DualEncoder(vocab, seed=args.seed)
    cfg = PretrainConfig(iters=args.iters, seed=args.seed)
    dual, report = contrastive_pretrain(dual, images, captions, cfg, eval_images, eval_captions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dual_encoder(dual, out / "dual.bin", out / "vocab.txt")
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _load_dual(encoder_dir):
    from .encoders import load_dual_encoder

    d = Path(encoder_dir)
    ckpt, vocab = d / "dual.bin", d / "vocab.txt"
    if not ckpt.exists() or not vocab.exists():
        raise FileNotFoundError(f"pretrained encoder checkpoint missing under {d}")
    return load_dual_encoder(ckpt, vocab)


def _overrides(args):
    pairs = []
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    return pairs


def cmd_train(args):
    from . import evaluation as E
    from .config import format_run_config, load_run_config
    from .synth import Dataset
    from .trainer import prepare, train, IEDPModel

    cfg = load_run_config(args.config, _overrides(args)).validate()
    sys.stdout.write(format_run_config(cfg))
    dual = _load_dual(cfg.encoder_dir)
    ds = Dataset(cfg.data, split=cfg.train_split)
    samples = [ds.sample(i) for i in range(len(ds))]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.txt").write_text(format_run_config(cfg))
    model = IEDPModel(cfg.train, dual, palette=ds.palette)
    data = prepare(samples, model)
    result = train(cfg.train, data, dual, run_dir=out, resume=args.resume, palette=ds.palette)
    log.info("trained %d iterations in %.1fs", cfg.train.max_iters, result.seconds)
    try:
        val = Dataset(cfg.data, split=cfg.val_split)
    except KeyError:
        log.warning("no %r split; skipping final evaluation", cfg.val_split)
        return EXIT_OK
    metrics, cm = evaluate_model(result.model, val, cfg.crop, cfg.stride, cfg.eval_multiscale)
    E.write_metrics(out / "metrics.json", metrics)
    if cm is not None:
        E.write_class_iou(out / "class_iou.csv", cm, ds.palette)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def load_trained(checkpoint_path):
    """Rebuild a model from a run-directory checkpoint and its run_config.txt."""
    from . import checkpoint
    from .config import load_run_config
    from .synth import Dataset
    from .trainer import IEDPModel

    checkpoint_path = Path(checkpoint_path)
    cfg_path = checkpoint_path.parent / "run_config.txt"
    if not cfg_path.exists():
        raise FileNotFoundError(f"run_config.txt not found next to {checkpoint_path}")
    cfg = load_run_config(cfg_path)
    palette = Dataset(cfg.data).palette if Path(cfg.data).exists() else None
    model = IEDPModel(cfg.train, _load_dual(cfg.encoder_dir), **({"palette": palette} if palette else {}))
    model.load_state_dict(checkpoint.load(checkpoint_path))
    return model, cfg


def predict_dataset(model, dataset, crop=64, stride=43, multiscale=False):
    """Implicit-branch predictions for every image, with annotation reads forbidden."""
    from . import evaluation as E
    from .trainer import inference_forward, label_guard

    with label_guard(dataset.label_paths()):
        if os.environ.get(FORCE_LABEL_READ_ENV):
            dataset.mask(0)
        images = [dataset.image(i) for i in range(len(dataset))]
        return E.predict_split(images, lambda tiles: inference_forward(model, tiles), model.config.task, crop, stride, multiscale=multiscale)


def evaluate_model(model, dataset, crop=64, stride=43, multiscale=False):
    from . import evaluation as E

    preds = predict_dataset(model, dataset, crop, stride, multiscale)
    if model.config.task == "segmentation":
        masks = [dataset.mask(i) for i in range(len(dataset))]
        return E.segmentation_report(preds, masks, len(model.palette))
    depths = [dataset.depth(i) for i in range(len(dataset))]
    return E.depth_report(preds, depths), None


def cmd_eval(args):
    from . import evaluation as E
    from .synth import Dataset

    model, cfg = load_trained(args.checkpoint)
    ds = Dataset(args.data, split=args.split)
    metrics, cm = evaluate_model(model, ds, cfg.crop, cfg.stride, args.multiscale or cfg.eval_multiscale)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}.json"
    E.write_metrics(out, metrics)
    if cm is not None:
        E.write_class_iou(out.with_suffix(".class_iou.csv"), cm, ds.palette)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_infer(args):
    from . import evaluation as E
    from .synth import Dataset

    model, cfg = load_trained(args.checkpoint)
    ds = Dataset(args.data, split=args.split)
    preds = predict_dataset(model, ds, cfg.crop, cfg.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    limit = len(ds) if args.limit is None else min(args.limit, len(ds))
    for i in range(limit):
        stem = Path(ds.entries[i]["image"]).stem
        if model.config.task == "segmentation":
            E.save_label_png(out / f"{stem}_seg.png", preds.outputs[i], len(model.palette))
        else:
            E.save_depth_png(out / f"{stem}_depth.png", preds.outputs[i])
    print(out)
    return EXIT_OK


def cmd_gradcheck(args):
    from .verify import run_suite

    passed, report = run_suite(args.scope, h=args.h, tol=args.tol)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    for name in report["failed"]:
        print(f"FAILED {name}: max rel err {report['entries'][name]['max_rel_err']:.3e}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_VERIFY


# -------------------------------------------------------------- parser --

def build_parser():
    p = _Parser(prog="iedp", description="Implicit/explicit language-guided dense prediction at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splits", default="0.8,0.2")
    g.set_defaults(func=cmd_gen_data)

    pe = sub.add_parser("pretrain-encoders", help="contrastively pretrain the image/text towers")
    pe.add_argument("--data", required=True, help="manifest.json")
    pe.add_argument("--out", required=True)
    pe.add_argument("--iters", type=int, default=1000)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--split", default="train")
    pe.add_argument("--eval-split", default="val")
    pe.set_defaults(func=cmd_pretrain_encoders)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", help="config file; keys may also be given with --set")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in the run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out")
    e.add_argument("--multiscale", action="store_true", help="also report two-scale mIoU")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write prediction images for a split")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split", default="val")
    i.add_argument("--out", required=True)
    i.add_argument("--limit", type=int)
    i.set_defaults(func=cmd_infer)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--scope", choices=("ops", "adapter", "unet", "heads", "all"), default="all")
    gc.add_argument("--h", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--out")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def _train_flags(argv):
    """Turn ``--some-key value`` pairs after ``train`` into ``--set some_key=value``."""
    if not argv or argv[0] != "train":
        return argv
    from .config import FIELD_TYPES

    out, i = [argv[0]], 1
    while i < len(argv):
        a = argv[i]
        key = a[2:].replace("-", "_") if a.startswith("--") else None
        if key in FIELD_TYPES and i + 1 < len(argv):
            out += ["--set", f"{key}={argv[i + 1]}"]
            i += 2
        else:
            out.append(a)
            i += 1
    return out


def main(argv=None):
    from .config import ConfigError
    from .trainer import LabelLeakError

    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap()
    try:
        args = build_parser().parse_args(_train_flags(argv))
        if not getattr(args, "func", None):
            raise UsageError("a command is required (see --help)")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LabelLeakError as exc:
        print(f"leak guard: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, KeyError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
