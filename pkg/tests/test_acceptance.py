"""End-to-end acceptance checks, one test per criterion.

The long training comparisons (criteria 6 to 8) reuse records cached under
``$IEDP_RESULTS_DIR`` (default ``results/benchmark`` in the repository); a cold
run trains every arm and takes roughly an hour on one CPU core.
"""
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from iedp import checkpoint
from iedp import tensor as T
from iedp.ablation import Benchmark, mean_metric, run_arms
from iedp.cli import predict_dataset
from iedp.encoders import DualEncoder, Vocabulary
from iedp.evaluation import ConfusionMatrix, depth_metrics, miou, sliding_window_infer
from iedp.heads import scale_invariant_loss
from iedp.prompts import ImplicitPromptModule
from iedp.synth import Dataset, caption_vocabulary, generate_sample, write_dataset
from iedp.trainer import IEDPModel, TrainConfig, branch_conds, inference_forward, joint_step, prepare, reachable_parameters, task_loss, train
from iedp.unet import UNet, UNetConfig
from iedp.verify import run_suite

RESULTS = Path(os.environ.get("IEDP_RESULTS_DIR", Path(__file__).resolve().parents[1] / "results" / "benchmark"))
SMALL = dict(nq=64, unet_channels=(8, 8, 8, 8), decoder_width=8, batch_size=2)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def dual():
    return DualEncoder(Vocabulary(caption_vocabulary()), seed=0).freeze()


def test_gradient_suite():
    t0 = time.perf_counter()
    passed, rep = run_suite("all", h=1e-5, tol=1e-4)
    secs = time.perf_counter() - t0
    report(1, passed and secs <= 300, f"{len(rep['entries'])} checks, max rel err {rep['max_rel_err']:.2e}, failed {rep['failed']}, {secs:.0f}s")


def test_adapter_oracle():
    from test_prompts import _randomize, oracle_embed

    mismatches = 0
    with T.precision(np.float64):
        for draw in range(100):
            rng = np.random.default_rng(1000 + draw)
            mod = ImplicitPromptModule(d_vis=12, d_cond=16, nq=10, n_patches=9, heads=4, seed=draw)
            _randomize(mod, rng)
            f_vis = T.Tensor(rng.normal(size=(9, 12)) @ rng.normal(size=(12, 16)))
            mismatches += not np.array_equal(mod.embed(f_vis).vectors.data, oracle_embed(mod, f_vis.data))
    report(2, mismatches == 0, f"{100 - mismatches}/100 draws bit-identical at float64")


def test_weight_sharing(dual):
    samples = [generate_sample(i) for i in range(4)]
    with T.precision(np.float64):
        model = IEDPModel(TrainConfig(**SMALL), dual).astype(np.float64)
        data = prepare(samples, model)
        idx = np.array([0, 1])
        params = dict(model.trainable_parameters())

        def losses():
            ci, ce = branch_conds(model, data, idx)
            return task_loss(model, model.predict(data.z0[idx], ci), data, idx), task_loss(model, model.predict(data.z0[idx], ce), data, idx)

        li, le = losses()
        shared = ("unet.", "head.")
        ri = {n: p for n, p in reachable_parameters(li).items() if n.startswith(shared)}
        re_ = {n: p for n, p in reachable_parameters(le).items() if n.startswith(shared)}
        a_ok = bool(ri) and set(ri) == set(re_) and all(ri[n] is re_[n] for n in ri)

        grads = {}
        for which in ("imp", "exp", "total"):
            model.zero_grad()
            li, le = losses()
            {"imp": li, "exp": le, "total": li + le}[which].backward()
            grads[which] = {n: p.grad.copy() for n, p in params.items()}
        err = max(float(np.max(np.abs(grads["total"][n] - grads["imp"][n] - grads["exp"][n]))) for n in params)

        ci, _ = branch_conds(model, data, idx)
        vals = joint_step(model, data, idx, conds=(ci, ci)).values()
    c_ok = vals[0] == vals[1]
    report(3, a_ok and err <= 1e-9 and c_ok, f"(a) {len(ri)} shared params identical={a_ok}; (b) max grad diff {err:.1e}; (c) L_imp == L_exp: {c_ok}")


def test_structural_contracts(dual):
    unet = UNet(UNetConfig(), seed=0)
    rng = np.random.default_rng(0)
    strides_ok = True
    for size in (64, 128, 192):
        with T.no_grad():
            b = unet(rng.normal(size=(1, 8, size // 8, size // 8)).astype(np.float32), T.Tensor(rng.normal(size=(256, 64)).astype(np.float32)))
        strides_ok &= [size // f.shape[-1] for f in b.taps] == [8, 16, 32, 64]
        strides_ok &= [size // f.shape[-2] for f in b.taps] == [8, 16, 32, 64]
    fca_err = float(np.max(np.abs(b.f_ca.data.sum(axis=1) - 1.0)))
    model = IEDPModel(TrainConfig(), dual)
    data = prepare([generate_sample(i) for i in range(2)], model)
    ci, ce = branch_conds(model, data, np.array([0, 1]))
    shapes_ok = ci.vectors.shape[1:] == ce.vectors.shape[1:] == (256, 64)
    report(4, strides_ok and fca_err <= 1e-4 and shapes_ok,
           f"strides 8/16/32/64 at 64/128/192: {strides_ok}; F_CA sum err {fca_err:.1e}; streams {ci.vectors.shape[1:]} and {ce.vectors.shape[1:]}")


def test_no_label_leak(dual, tmp_path):
    manifest = write_dataset(12, tmp_path / "full", (0.5, 0.5), seed=5)
    train_ds = Dataset(manifest, split="train")
    cfg = TrainConfig(**SMALL, max_iters=5)
    model = train(cfg, [train_ds.sample(i) for i in range(len(train_ds))], dual).model
    with_labels = predict_dataset(model, Dataset(manifest, split="val"))

    shutil.copytree(tmp_path / "full", tmp_path / "stripped")
    stripped = tmp_path / "stripped" / "manifest.json"
    for p in Dataset(stripped).label_paths():
        os.remove(p)
    without = predict_dataset(model, Dataset(stripped, split="val"))
    same = all(np.array_equal(a, b) for a, b in zip(with_labels.outputs, without.outputs))
    report(5, same and len(without.outputs) == 6, f"{len(without.outputs)} predictions with label files deleted, bit-identical: {same}")


@pytest.fixture(scope="module")
def seg_runs():
    return run_arms(Benchmark(), ("full", "implicit_only", "unaligned_baseline", "caption_prompts"), RESULTS)


def _fmt(runs, arm):
    vals = [100 * r["metrics"]["miou_ss"] for r in runs[arm]]
    return f"{arm} {np.mean(vals):.2f} ({', '.join(f'{v:.2f}' for v in vals)})"


def test_trend_full_implicit_baseline(seg_runs):
    full, imp, base = (100 * mean_metric(seg_runs[a], "miou_ss") for a in ("full", "implicit_only", "unaligned_baseline"))
    slowest = max(r["seconds"] for a in ("full", "implicit_only", "unaligned_baseline") for r in seg_runs[a])
    ok = full > imp > base and full - base >= 2.0 and slowest <= 1800
    detail = "; ".join(_fmt(seg_runs, a) for a in ("full", "implicit_only", "unaligned_baseline"))
    report(6, ok, f"mean val mIoU {detail}; full - baseline {full - base:.2f}; slowest run {slowest:.0f}s")


def test_trend_labels_vs_captions(seg_runs):
    gt, cap = (100 * mean_metric(seg_runs[a], "miou_ss") for a in ("full", "caption_prompts"))
    report(7, gt >= cap, f"ground-truth prompts {gt:.2f} vs caption prompts {cap:.2f} ({_fmt(seg_runs, 'caption_prompts')})")


def test_depth_sanity():
    runs = run_arms(Benchmark(task="depth", seeds=(0,)), ("full",), RESULTS)
    m = runs["full"][0]["metrics"]
    gain = 1.0 - m["rmse"] / m["constant_rmse"]
    gt = np.random.default_rng(0).uniform(0.5, 10.0, size=(3, 1, 16, 16))
    with T.precision(np.float64):
        si = max(abs(float(scale_invariant_loss(T.Tensor(a * gt), gt, lam=1.0).data)) for a in (0.1, 0.5, 3.0, 40.0))
    report(8, gain >= 0.30 and si <= 1e-9, f"RMSE {m['rmse']:.3f} vs constant {m['constant_rmse']:.3f} ({100 * gain:.1f}% lower); SI scaled loss {si:.1e}")


def test_metric_oracles():
    from test_evaluation import brute_depth, brute_miou

    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        C = int(rng.integers(2, 7))
        gt = rng.integers(0, C, size=(8, 8)).astype(np.uint8)
        gt[rng.random((8, 8)) < 0.1] = 255
        pred = rng.integers(0, C, size=(8, 8)).astype(np.uint8)
        worst = max(worst, abs(miou(ConfusionMatrix.from_labels(gt, pred, C)) - brute_miou(gt, pred, C)))
        g = rng.uniform(0.5, 10, size=(8, 8))
        p = g * rng.uniform(0.5, 2.0, size=(8, 8))
        m = depth_metrics(p, g)
        got = (m.rmse, m.rel, m.log10, m.delta1, m.delta2, m.delta3)
        worst = max(worst, max(abs(a - b) for a, b in zip(got, brute_depth(p, g))))
    model = IEDPModel(TrainConfig(**SMALL), DualEncoder(Vocabulary(caption_vocabulary()), seed=0).freeze())
    img = generate_sample(9).image
    direct = inference_forward(model, img[None])[0]
    tiled = sliding_window_infer(img, lambda t: inference_forward(model, t), crop=64)
    exact = np.array_equal(direct, tiled)
    report(9, worst <= 1e-10 and exact, f"1000 cases, worst deviation {worst:.1e}; single-tile window bit-exact: {exact}")


def test_determinism(dual, tmp_path):
    samples = [generate_sample(i) for i in range(16)]
    cfg = TrainConfig(max_iters=20, checkpoint_every=10, batch_size=4)
    for name in ("a", "b"):
        train(cfg, samples, dual, run_dir=tmp_path / name)
    csv_same = (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
    hashes = [checkpoint.file_hash(tmp_path / n / "ckpt_0000020.bin") for n in ("a", "b")]
    report(10, csv_same and hashes[0] == hashes[1], f"loss CSV identical: {csv_same}; checkpoint sha256 {hashes[0][:12]} vs {hashes[1][:12]}")
