import numpy as np
import pytest

from iedp import tensor as T
from iedp.encoders import DualEncoder, Vocabulary, encode_text_clip
from iedp.prompts import (
    ExplicitPromptModule,
    ImplicitPromptModule,
    MLPPromptModule,
    Projector,
    build_prompt,
    tile_index,
)
from iedp.synth import PALETTE, caption_vocabulary


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


# --- independent numpy recomputation of the adapter -------------------------

def _ln(x, p):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + p.eps)) * p.gain.data + p.bias.data


def _linear(x, lin):
    y = np.matmul(x, lin.weight.data)
    return y + lin.bias.data if lin.bias is not None else y


def _mha(xq, xkv, qpos, kpos, m):
    h = m.n_heads
    q = _linear(xq + qpos, m.w_q)
    k = _linear(xkv + kpos, m.w_k)
    v = _linear(xkv, m.w_v)

    def split(a):
        L, d = a.shape
        return a.reshape(L, h, d // h).transpose(1, 0, 2)

    q, k, v = split(q), split(k), split(v)
    s = np.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    o = np.matmul(w, v).transpose(1, 0, 2)
    return _linear(o.reshape(o.shape[0], -1), m.w_o)


def _silu(x):
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def oracle_embed(mod, f_vis):
    Q = mod.queries.data
    qp, kp = mod.query_pos.data, mod.key_pos.data
    q_s = Q + _mha(_ln(Q, mod.ln_q), _ln(Q, mod.ln_q), qp, qp, mod.self_attn)
    q_c = q_s + _mha(_ln(q_s, mod.ln_s), _ln(f_vis, mod.ln_vis), qp, kp, mod.cross_attn)
    h = _ln(q_c, mod.ln_c)
    return q_c + _linear(_silu(_linear(h, mod.ffn.fc1)), mod.ffn.fc2)


def _randomize(mod, rng):
    for _, p in mod.named_parameters():
        p.data = rng.normal(0.0, 0.5, size=p.shape)


def test_adapter_matches_oracle_bit_exactly(f64):
    for draw in range(100):
        rng = np.random.default_rng(draw)
        mod = ImplicitPromptModule(d_vis=12, d_cond=16, nq=10, n_patches=9, heads=4, seed=draw)
        _randomize(mod, rng)
        f_vis = T.Tensor(rng.normal(size=(9, 16)))
        out = mod.embed(f_vis).vectors.data
        np.testing.assert_array_equal(out, oracle_embed(mod, f_vis.data))


def test_zero_blocks_pass_queries_through(f64):
    mod = ImplicitPromptModule(d_vis=8, d_cond=8, nq=6, n_patches=4, heads=2, seed=1)
    for m in (mod.self_attn.w_o, mod.cross_attn.w_o, mod.ffn.fc2):
        m.weight.data[:] = 0.0
        m.bias.data[:] = 0.0
    out = mod(np.random.default_rng(0).normal(size=(4, 8))).vectors.data
    np.testing.assert_array_equal(out, mod.queries.data)


def test_key_permutation_invariance_without_positions(f64):
    mod = ImplicitPromptModule(d_vis=8, d_cond=8, nq=6, n_patches=5, heads=2, position_embeddings=False, seed=2)
    feats = np.random.default_rng(1).normal(size=(5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    a = mod(feats).vectors.data
    b = mod(feats[perm]).vectors.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_positions_break_permutation_symmetry(f64):
    mod = ImplicitPromptModule(d_vis=8, d_cond=8, nq=6, n_patches=5, heads=2, position_embeddings=True, seed=2)
    feats = np.random.default_rng(1).normal(size=(5, 8))
    assert not np.allclose(mod(feats).vectors.data, mod(feats[::-1]).vectors.data)


def test_default_shape_and_batching():
    mod = ImplicitPromptModule(d_vis=64, d_cond=64)
    out = mod(np.random.default_rng(0).normal(size=(3, 64, 64)).astype(np.float32))
    assert out.vectors.shape == (3, 256, 64) and out.count == 256
    assert set(mod.last) == {"q_s", "q_c"}


def test_non_finite_input_rejected():
    mod = ImplicitPromptModule(d_vis=4, d_cond=4, nq=2, n_patches=2, heads=1)
    with pytest.raises(ValueError, match="non-finite"):
        mod.embed(T.Tensor(np.array([[np.nan, 0, 0, 0], [0, 0, 0, 0]], dtype=np.float32)))


def test_projector_zero_second_layer_is_affine(f64):
    proj = Projector(5, 7, np.random.default_rng(0))
    proj.fc2.weight.data[:] = 0.0
    proj.fc2.bias.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(64, 5))
    out = proj(T.Tensor(x)).data
    assert out.shape == (64, 7)
    np.testing.assert_allclose(out, x @ proj.fc1.weight.data + proj.fc1.bias.data, atol=1e-14)


def test_mlp_adapter_tiles():
    mod = MLPPromptModule(8, 4, nq=10)
    out = mod(np.random.default_rng(0).normal(size=(3, 8)).astype(np.float32)).vectors.data
    assert out.shape == (10, 4)
    np.testing.assert_array_equal(out[3], out[0])


class TestBuildPrompt:
    def test_palette_order(self):
        assert build_prompt({"sky", "wall"}, PALETTE).text == "wall sky "

    def test_singleton(self):
        assert build_prompt({"floor"}, PALETTE).text == "floor "

    def test_duplicates_collapse(self):
        assert build_prompt(["lamp", "lamp", "wall"], PALETTE).text == "wall lamp "

    def test_empty_falls_back(self):
        warnings = []
        assert build_prompt(set(), PALETTE, warnings=warnings).text == "wall "
        assert warnings

    def test_unknown(self):
        with pytest.raises(KeyError):
            build_prompt({"dragon"}, PALETTE)


class TestExplicit:
    def test_tiling_pattern(self):
        np.testing.assert_array_equal(tile_index(4, 10), [0, 1, 2, 3, 0, 1, 2, 3, 0, 1])

    def test_rows_follow_tokens(self, f64):
        mod = ExplicitPromptModule(6, 5, nq=10)
        feats = np.random.default_rng(0).normal(size=(4, 6))
        out = mod(feats).vectors.data
        proj = feats @ mod.proj.weight.data + mod.proj.bias.data
        np.testing.assert_allclose(out, proj[tile_index(4, 10)], atol=1e-14)

    def test_lt_equals_nq_is_identity_tiling(self, f64):
        mod = ExplicitPromptModule(6, 5, nq=4)
        feats = np.random.default_rng(1).normal(size=(4, 6))
        np.testing.assert_allclose(mod(feats).vectors.data, feats @ mod.proj.weight.data + mod.proj.bias.data, atol=1e-14)

    def test_batched_variable_length(self):
        mod = ExplicitPromptModule(6, 5, nq=8)
        rng = np.random.default_rng(2)
        out = mod([rng.normal(size=(3, 6)), rng.normal(size=(5, 6))])
        assert out.vectors.shape == (2, 8, 5) and out.source == "explicit"

    def test_distinct_prompts_distinct_embeddings(self):
        dual = DualEncoder(Vocabulary(caption_vocabulary()), seed=0).freeze()
        mod = ExplicitPromptModule(64, 64, nq=256)
        a, _, ma = encode_text_clip(dual, "wall table ")
        b, _, mb = encode_text_clip(dual, "sky lamp ")
        ea, eb = mod(a[ma]).vectors.data, mod(b[mb]).vectors.data
        assert ea.shape == eb.shape == (256, 64)
        assert not np.allclose(ea, eb)

    def test_prompt_contains_only_present_words(self):
        vocab = Vocabulary(caption_vocabulary())
        p = build_prompt({"chair"}, PALETTE).text
        words = {vocab.itos[i] for i in vocab.tokenize(p)} - {"<start>", "<end>"}
        assert words == {"chair"}
