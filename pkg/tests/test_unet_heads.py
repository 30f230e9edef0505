import math

import numpy as np
import pytest

from iedp import tensor as T
from iedp.heads import (
    DepthHead,
    SegHead,
    cross_entropy_loss,
    scale_invariant_loss,
    total_loss,
)
from iedp.nn import Parameter
from iedp.unet import (
    ConfigError,
    UNet,
    UNetConfig,
    UnsupportedTimestepError,
    count_cross_attention_blocks,
)
from iedp.verify import check_heads, mini_unet_config


@pytest.fixture(scope="module")
def unet():
    return UNet(UNetConfig(), seed=0)


def _cond(rng, nq=256, d=64, b=None):
    shape = (nq, d) if b is None else (b, nq, d)
    return T.Tensor(rng.normal(size=shape).astype(np.float32))


class TestUNet:
    @pytest.mark.parametrize("size", [64, 128])
    def test_stride_ladder(self, unet, size):
        rng = np.random.default_rng(0)
        z0 = rng.normal(size=(1, 8, size // 8, size // 8)).astype(np.float32)
        with T.no_grad():
            b = unet(z0, _cond(rng))
        assert [f.shape[-1] for f in b.taps] == [size // 8, size // 16, size // 32, size // 64]
        assert [f.shape[-2] for f in b.taps] == [size // 8, size // 16, size // 32, size // 64]

    def test_f_ca_is_distribution(self, unet):
        rng = np.random.default_rng(1)
        with T.no_grad():
            b = unet(rng.normal(size=(2, 8, 8, 8)).astype(np.float32), _cond(rng, b=2))
        assert b.f_ca.shape == (2, 256, 8, 8)
        assert np.max(np.abs(b.f_ca.data.sum(axis=1) - 1.0)) < 1e-4
        for w in b.attn_maps:
            assert np.max(np.abs(w.data.sum(axis=-1) - 1.0)) < 1e-6

    def test_default_block_count(self):
        assert count_cross_attention_blocks(UNetConfig()) == (2, 2)

    def test_maps_match_denominator(self, unet):
        rng = np.random.default_rng(2)
        with T.no_grad():
            b = unet(rng.normal(size=(1, 8, 8, 8)).astype(np.float32), _cond(rng))
        assert len(b.attn_maps) == sum(count_cross_attention_blocks(unet.config))

    def test_decoder_only_attention_rejected(self):
        with pytest.raises(ConfigError):
            UNetConfig(encoder_attention=(False, False, False)).validate()

    def test_conditioning_is_live(self, unet):
        rng = np.random.default_rng(3)
        z0 = rng.normal(size=(1, 8, 8, 8)).astype(np.float32)
        with T.no_grad():
            a = unet(z0, _cond(rng)).f1.data
            b = unet(z0, _cond(rng)).f1.data
        assert not np.allclose(a, b)

    def test_nonzero_timestep_rejected(self, unet):
        with pytest.raises(UnsupportedTimestepError):
            unet(np.zeros((1, 8, 8, 8), np.float32), _cond(np.random.default_rng(0)), t=5)

    def test_cond_width_checked(self, unet):
        with pytest.raises(T.DimensionError):
            unet(np.zeros((1, 8, 8, 8), np.float32), T.Tensor(np.zeros((4, 32), np.float32)))

    def test_latent_extent_checked(self, unet):
        with pytest.raises(T.DimensionError):
            unet(np.zeros((1, 8, 12, 12), np.float32), _cond(np.random.default_rng(0)))

    def test_mini_config_valid(self):
        assert count_cross_attention_blocks(mini_unet_config()) == (2, 2)


def _bundle(unet, rng, b=1):
    with T.no_grad():
        return unet(rng.normal(size=(b, 8, 8, 8)).astype(np.float32), _cond(rng, b=b))


class TestHeads:
    def test_seg_extent(self, unet):
        head = SegHead(UNetConfig().channels, 256, 6)
        with T.no_grad():
            out = head(_bundle(unet, np.random.default_rng(0), b=2))
        assert out.shape == (2, 6, 64, 64)

    def test_zero_classifier_is_uniform(self, unet):
        head = SegHead(UNetConfig().channels, 256, 6)
        head.classifier.weight.data[:] = 0.0
        head.classifier.bias.data[:] = 0.0
        with T.no_grad():
            p = T.softmax(head(_bundle(unet, np.random.default_rng(1))), axis=1).data
        np.testing.assert_allclose(p, 1 / 6, atol=1e-6)

    def test_depth_positive(self, unet):
        head = DepthHead(UNetConfig().channels, 256)
        rng = np.random.default_rng(2)
        for p in head.parameters():
            p.data = rng.normal(0, 2.0, size=p.shape).astype(np.float32)
        with T.no_grad():
            d = head(_bundle(unet, rng)).data
        assert d.shape == (1, 1, 64, 64) and (d > 0).all()

    def test_gradchecks(self):
        reports = check_heads()
        assert all(r.passed for r in reports.values())


class TestCrossEntropy:
    def test_uniform_is_log_c(self):
        with T.precision(np.float64):
            loss = cross_entropy_loss(T.Tensor(np.zeros((1, 5, 3, 3))), np.zeros((1, 3, 3), np.uint8))
        assert float(loss.data) == pytest.approx(math.log(5), abs=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 50.0
        loss = cross_entropy_loss(T.Tensor(logits), np.ones((1, 2, 2), np.uint8))
        assert float(loss.data) < 1e-15

    def test_hand_summed_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(1, 3, 4, 4))
        mask = rng.integers(0, 3, size=(1, 4, 4)).astype(np.uint8)
        mask[0, 0, :2] = 255
        total, n = 0.0, 0
        for y in range(4):
            for x in range(4):
                c = mask[0, y, x]
                if c == 255:
                    continue
                z = logits[0, :, y, x]
                total += -(z[c] - math.log(sum(math.exp(v) for v in z)))
                n += 1
        with T.precision(np.float64):
            loss = cross_entropy_loss(T.Tensor(logits), mask)
        assert abs(float(loss.data) - total / n) < 1e-10

    def test_ignored_pixels_get_zero_gradient(self):
        with T.precision(np.float64):
            logits = Parameter(np.random.default_rng(1).normal(size=(1, 3, 2, 2)))
            mask = np.array([[[0, 255], [2, 255]]], np.uint8)
            cross_entropy_loss(logits, mask).backward()
        np.testing.assert_array_equal(logits.grad[0, :, :, 1], 0.0)
        assert np.abs(logits.grad[0, :, :, 0]).sum() > 0

    def test_all_ignored_is_zero_with_warning(self):
        warnings = []
        loss = cross_entropy_loss(T.Tensor(np.ones((1, 2, 2, 2))), np.full((1, 2, 2), 255, np.uint8), warnings=warnings)
        assert float(loss.data) == 0.0 and warnings


class TestScaleInvariant:
    def test_exact_prediction(self):
        gt = np.random.default_rng(0).uniform(1, 5, size=(1, 1, 4, 4))
        with T.precision(np.float64):
            assert float(scale_invariant_loss(T.Tensor(gt), gt).data) == 0.0

    def test_pure_scaling_free_at_lambda_one(self):
        gt = np.random.default_rng(1).uniform(1, 5, size=(2, 1, 4, 4))
        with T.precision(np.float64):
            for alpha in (0.3, 2.0, 7.5):
                assert abs(float(scale_invariant_loss(T.Tensor(alpha * gt), gt, lam=1.0).data)) < 1e-9

    def test_double_depth_half_lambda(self):
        gt = np.random.default_rng(2).uniform(1, 5, size=(1, 1, 4, 4))
        with T.precision(np.float64):
            loss = float(scale_invariant_loss(T.Tensor(2 * gt), gt, lam=0.5).data)
        g = np.log(2 * gt) - np.log(gt)
        brute = float((g**2).sum() / g.size - 0.5 * g.sum() ** 2 / g.size**2)
        assert loss == pytest.approx(0.5 * math.log(2) ** 2, abs=1e-12)
        assert loss == pytest.approx(0.2402, abs=1e-4)
        assert loss == pytest.approx(brute, abs=1e-12)

    def test_per_image_average(self):
        rng = np.random.default_rng(3)
        gt = rng.uniform(1, 5, size=(2, 1, 3, 3))
        pred = rng.uniform(1, 5, size=(2, 1, 3, 3))
        with T.precision(np.float64):
            both = float(scale_invariant_loss(T.Tensor(pred), gt).data)
            a = float(scale_invariant_loss(T.Tensor(pred[:1]), gt[:1]).data)
            b = float(scale_invariant_loss(T.Tensor(pred[1:]), gt[1:]).data)
        assert both == pytest.approx((a + b) / 2, abs=1e-12)

    def test_empty_mask(self):
        warnings = []
        loss = scale_invariant_loss(T.Tensor(np.ones((1, 1, 2, 2))), np.zeros((1, 1, 2, 2)), warnings=warnings)
        assert float(loss.data) == 0.0 and warnings


def test_total_loss_without_explicit():
    rep = total_loss(T.Tensor(np.float32(1.5)), None)
    assert rep.values() == (1.5, 0.0, 1.5)
