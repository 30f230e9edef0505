import csv

import numpy as np
import pytest

from iedp import checkpoint
from iedp import tensor as T
from iedp.encoders import DualEncoder, Vocabulary
from iedp.synth import caption_vocabulary, generate_sample
from iedp.trainer import (
    IEDPModel,
    LabelLeakError,
    PreparedData,
    TrainConfig,
    batch_indices,
    branch_conds,
    inference_forward,
    joint_step,
    label_guard,
    prepare,
    reachable_parameters,
    task_loss,
    train,
)
from iedp.optim import AdamW

SMALL = dict(nq=8, unet_channels=(8, 8, 8, 8), decoder_width=8, batch_size=2, max_iters=4, checkpoint_every=2)


@pytest.fixture(scope="module")
def dual():
    return DualEncoder(Vocabulary(caption_vocabulary()), seed=0).freeze()


@pytest.fixture(scope="module")
def samples():
    return [generate_sample(i) for i in range(6)]


def _model64(dual, **kw):
    cfg = TrainConfig(**{**SMALL, **kw})
    with T.precision(np.float64):
        model = IEDPModel(cfg, dual).astype(np.float64)
    return model


def _prepare64(model, samples):
    with T.precision(np.float64):
        return prepare(samples, model)


class TestWeightSharing:
    def test_reachable_shared_sets_identical(self, dual, samples):
        model = _model64(dual)
        data = _prepare64(model, samples)
        idx = np.array([0, 1])
        with T.precision(np.float64):
            ci, ce = branch_conds(model, data, idx)
            l_imp = task_loss(model, model.predict(data.z0[idx], ci), data, idx)
            l_exp = task_loss(model, model.predict(data.z0[idx], ce), data, idx)
        shared = ("unet.", "head.")
        ri = {n: p for n, p in reachable_parameters(l_imp).items() if n.startswith(shared)}
        re_ = {n: p for n, p in reachable_parameters(l_exp).items() if n.startswith(shared)}
        assert set(ri) == set(re_) and ri
        assert all(ri[n] is re_[n] for n in ri)
        assert not any(n.startswith("explicit.") for n in reachable_parameters(l_imp))
        assert not any(n.startswith("adapter.") for n in reachable_parameters(l_exp))

    def test_total_gradient_is_sum(self, dual, samples):
        model = _model64(dual)
        data = _prepare64(model, samples)
        idx = np.array([2, 3])
        params = dict(model.trainable_parameters())

        def grads(which):
            model.zero_grad()
            with T.precision(np.float64):
                ci, ce = branch_conds(model, data, idx)
                li = task_loss(model, model.predict(data.z0[idx], ci), data, idx)
                le = task_loss(model, model.predict(data.z0[idx], ce), data, idx)
                {"imp": li, "exp": le, "total": li + le}[which].backward()
            return {n: p.grad.copy() for n, p in params.items()}

        g_i, g_e, g_t = grads("imp"), grads("exp"), grads("total")
        for n in params:
            assert np.max(np.abs(g_t[n] - (g_i[n] + g_e[n]))) < 1e-9, n

    def test_identical_embeddings_identical_losses(self, dual, samples):
        model = _model64(dual)
        data = _prepare64(model, samples)
        idx = np.array([0, 4])
        with T.precision(np.float64):
            ci, _ = branch_conds(model, data, idx)
            rep = joint_step(model, data, idx, conds=(ci, ci))
        assert rep.values()[0] == rep.values()[1]


class TestStep:
    def test_freeze_contract(self, dual, samples):
        model = IEDPModel(TrainConfig(**SMALL), dual)
        data = prepare(samples, model)
        frozen = {n: p.data.copy() for n, p in model.named_parameters() if n.startswith(("latent.", "clip."))}
        unet_before = {n: p.data.copy() for n, p in model.named_parameters() if n.startswith("unet.")}
        opt = AdamW(model.trainable_parameters())
        joint_step(model, data, np.array([0, 1]), opt, 1e-3)
        for n, p in model.named_parameters():
            if n in frozen:
                np.testing.assert_array_equal(p.data, frozen[n])
        assert any(not np.array_equal(p.data, unet_before[n]) for n, p in model.named_parameters() if n in unet_before)
        assert not any(n.startswith(("latent.", "clip.")) for n in opt.m)

    def test_stream_shapes(self, dual, samples):
        model = IEDPModel(TrainConfig(**SMALL), dual)
        data = prepare(samples, model)
        ci, ce = branch_conds(model, data, np.array([0, 1]))
        assert ci.vectors.shape == ce.vectors.shape == (2, 8, 64)

    def test_batch_indices_depend_on_seed_and_iter(self):
        a = batch_indices(0, 5, 100, 8)
        np.testing.assert_array_equal(a, batch_indices(0, 5, 100, 8))
        assert not np.array_equal(a, batch_indices(0, 6, 100, 8))
        assert len(set(a)) == 8

    def test_unaligned_baseline_uses_fixed_prompt(self, dual, samples):
        model = IEDPModel(TrainConfig(**SMALL, implicit_branch_enabled=False, explicit_branch_enabled=False), dual)
        data = prepare(samples, model)
        ci, ce = branch_conds(model, data, np.array([0, 1]))
        assert ce is None and ci.vectors.shape == (8, 64)
        assert model.unaligned_prompt() == "wall floor sky table chair lamp "

    def test_config_validation(self):
        with pytest.raises(ValueError, match="adapter_kind"):
            TrainConfig(adapter_kind="lstm").validate()


class TestInference:
    def test_ignores_explicit_module(self, dual, samples):
        model = _model64(dual)
        imgs = np.stack([s.image for s in samples[:2]]).astype(np.float64)
        with T.precision(np.float64):
            a = inference_forward(model, imgs)
            for p in model.explicit.parameters():
                p.data = np.full_like(p.data, np.nan)
            b = inference_forward(model, imgs)
        np.testing.assert_array_equal(a, b)

    def test_repeatable_and_shaped(self, dual, samples):
        model = IEDPModel(TrainConfig(**SMALL), dual)
        a = inference_forward(model, samples[0].image)
        assert a.shape == (6, 64, 64)
        np.testing.assert_array_equal(a, inference_forward(model, samples[0].image))

    def test_depth_output(self, dual, samples):
        model = IEDPModel(TrainConfig(**SMALL, task="depth"), dual)
        d = inference_forward(model, np.stack([s.image for s in samples[:2]]))
        assert d.shape == (2, 64, 64) and (d > 0).all()


class TestLeakGuard:
    def test_blocks_forbidden_reads(self, tmp_path):
        secret = tmp_path / "mask.png"
        secret.write_bytes(b"x")
        with label_guard([secret]) as state:
            with pytest.raises(LabelLeakError):
                open(secret, "rb")
            (tmp_path / "ok.txt").write_text("fine")
        assert state.attempts >= 1
        assert open(secret, "rb").read() == b"x"  # restored afterwards


class TestTraining:
    def test_runs_write_csv_and_checkpoints(self, dual, samples, tmp_path):
        res = train(TrainConfig(**SMALL), samples, dual, run_dir=tmp_path)
        rows = list(csv.reader(open(tmp_path / "loss.csv")))
        assert rows[0] == ["iter", "lr", "L_imp", "L_exp", "L_total"] and len(rows) == 5
        assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == ["ckpt_0000002.bin", "ckpt_0000004.bin"]
        assert len(res.losses) == 4

    def test_determinism(self, dual, samples, tmp_path):
        train(TrainConfig(**SMALL), samples, dual, run_dir=tmp_path / "a")
        train(TrainConfig(**SMALL), samples, dual, run_dir=tmp_path / "b")
        assert (tmp_path / "a/loss.csv").read_bytes() == (tmp_path / "b/loss.csv").read_bytes()
        assert checkpoint.file_hash(tmp_path / "a/ckpt_0000004.bin") == checkpoint.file_hash(tmp_path / "b/ckpt_0000004.bin")

    def test_resume_is_bit_identical(self, dual, samples, tmp_path):
        cfg = TrainConfig(**SMALL)
        train(cfg, samples, dual, run_dir=tmp_path / "full")
        train(cfg, samples, dual, run_dir=tmp_path / "cut", stop_after=2)
        train(cfg, samples, dual, run_dir=tmp_path / "cut", resume=True)
        assert (tmp_path / "full/loss.csv").read_bytes() == (tmp_path / "cut/loss.csv").read_bytes()
        assert checkpoint.file_hash(tmp_path / "full/ckpt_0000004.bin") == checkpoint.file_hash(tmp_path / "cut/ckpt_0000004.bin")

    def test_implicit_only_has_zero_explicit_loss(self, dual, samples):
        res = train(TrainConfig(**SMALL, explicit_branch_enabled=False), samples, dual)
        assert all(r[3] == 0.0 and r[4] == r[2] for r in res.losses)

    def test_mlp_adapter_and_depth(self, dual, samples):
        res = train(TrainConfig(**SMALL, adapter_kind="mlp_only", task="depth"), samples, dual)
        assert np.isfinite([r[4] for r in res.losses]).all()

    def test_loss_decreases_on_tiny_set(self, dual, samples):
        cfg = TrainConfig(**{**SMALL, "max_iters": 60, "batch_size": 4}, base_lr=3e-3)
        res = train(cfg, samples[:4], dual)
        first = np.mean([r[2] for r in res.losses[:5]])
        last = np.mean([r[2] for r in res.losses[-5:]])
        assert last < 0.7 * first
