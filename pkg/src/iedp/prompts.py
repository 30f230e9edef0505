"""The two conditioning streams.

Implicit: frozen image-tower patch features -> MLP projector -> learnable
queries that self-attend, cross-attend to the projected patches and pass
through a feed-forward layer, all as pre-norm residual updates.

Explicit: a prompt listing the ground-truth class words -> frozen text tower
-> shared linear projection -> rows tiled cyclically to the query count.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T

log = logging.getLogger(__name__)

BACKGROUND_FALLBACK = "wall"


@dataclass(frozen=True)
class PromptText:
    text: str
    classes: tuple


@dataclass
class PromptEmbeddings:
    vectors: T.Tensor  # (Nq, D_cond) or (B, Nq, D_cond)
    source: str  # "implicit" | "explicit" | "unaligned"

    @property
    def count(self):
        return self.vectors.shape[-2]


def build_prompt(classes, palette, fallback=BACKGROUND_FALLBACK, warnings=None):
    """Each present class word followed by one space, in palette order.

    An empty class set falls back to the designated background word.
    """
    present = set(classes)
    unknown = present - set(palette)
    if unknown:
        raise KeyError(f"classes not in palette: {sorted(unknown)}")
    if not present:
        msg = f"empty class set; using fallback word {fallback!r}"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
        present = {fallback}
    ordered = [w for w in palette if w in present]
    return PromptText("".join(w + " " for w in ordered), tuple(ordered))


class Projector(nn.Module):
    """Per-token MLP ``h + W2 silu(h)`` with ``h = W1 x + b1``."""

    def __init__(self, d_in, d_out, rng):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out, rng)
        self.fc2 = nn.Linear(d_out, d_out, rng)

    def forward(self, x):
        if x.shape[-1] != self.fc1.weight.shape[0]:
            raise T.DimensionError(f"projector expects width {self.fc1.weight.shape[0]}, got {x.shape[-1]}")
        h = self.fc1(x)
        return h + self.fc2(T.silu(h))


class ImplicitPromptModule(nn.Module):
    """Learnable-query adapter turning projected visual features into
    ``nq`` conditioning vectors of width ``d_cond``."""

    def __init__(self, d_vis, d_cond, nq=256, n_patches=64, heads=4, position_embeddings=True, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        dt = T.get_default_dtype()
        self.nq, self.d_cond = nq, d_cond
        self.position_embeddings = position_embeddings
        self.projector = Projector(d_vis, d_cond, rng)
        self.queries = nn.Parameter(rng.normal(0, 1.0, (nq, d_cond)).astype(dt))
        self.query_pos = nn.Parameter(rng.normal(0, 0.1, (nq, d_cond)).astype(dt))
        self.key_pos = nn.Parameter(rng.normal(0, 0.1, (n_patches, d_cond)).astype(dt))
        self.ln_q = nn.LayerNorm(d_cond)
        self.self_attn = nn.MultiHeadAttention(d_cond, d_cond, d_cond, heads, rng)
        self.ln_s = nn.LayerNorm(d_cond)
        self.ln_vis = nn.LayerNorm(d_cond)
        self.cross_attn = nn.MultiHeadAttention(d_cond, d_cond, d_cond, heads, rng)
        self.ln_c = nn.LayerNorm(d_cond)
        self.ffn = nn.FeedForward(d_cond, 2 * d_cond, rng)
        self.last = {}

    def project_visual(self, patch_features):
        """Per-token MLP projection of frozen patch features (..., Np, D) -> (..., Np, D_cond)."""
        return self.projector(T.Tensor(np.asarray(patch_features, dtype=self.queries.dtype)))

    def embed(self, f_vis):
        """Queries -> implicit text embeddings. ``f_vis`` is (Np, D_cond) or (B, Np, D_cond).

        Intermediates ``q_s`` and ``q_c`` are kept in ``self.last``.
        """
        if not np.isfinite(f_vis.data).all():
            raise ValueError("non-finite visual features")
        qp = self.query_pos if self.position_embeddings else None
        kp = self.key_pos if self.position_embeddings else None
        q = self.queries
        h = self.ln_q(q)
        sa, _ = self.self_attn(h, h, q_pos=qp, k_pos=qp)
        q_s = q + sa
        ca, _ = self.cross_attn(self.ln_s(q_s), self.ln_vis(f_vis), q_pos=qp, k_pos=kp)
        q_c = q_s + ca
        out = q_c + self.ffn(self.ln_c(q_c))
        self.last = {"q_s": q_s, "q_c": q_c}
        return PromptEmbeddings(out, "implicit")

    def forward(self, patch_features):
        return self.embed(self.project_visual(patch_features))


class MLPPromptModule(nn.Module):
    """Adapter ablation: projector only, rows tiled to ``nq``."""

    def __init__(self, d_vis, d_cond, nq=256, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.nq, self.d_cond = nq, d_cond
        self.projector = Projector(d_vis, d_cond, rng)

    def forward(self, patch_features):
        f_vis = self.projector(T.Tensor(np.asarray(patch_features, dtype=self.projector.fc1.weight.dtype)))
        return PromptEmbeddings(T.tile_rows(f_vis, self.nq), "implicit")


class ExplicitPromptModule(nn.Module):
    """Shared linear map from text-tower width to ``d_cond`` plus cyclic tiling.

    Token features come from the frozen text tower; only the projection is
    trainable and it is used by the explicit branch alone.
    """

    def __init__(self, d_text, d_cond, nq=256, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed + 7)
        self.nq, self.d_cond = nq, d_cond
        self.proj = nn.Linear(d_text, d_cond, rng)

    def forward(self, token_features):
        """``token_features``: real tokens only, (Lt, D) or a list of such arrays
        (one per batch item, lengths may differ)."""
        if isinstance(token_features, (list, tuple)):
            rows = [self._tiled(f) for f in token_features]
            return PromptEmbeddings(T.stack(rows, axis=0), "explicit")
        return PromptEmbeddings(self._tiled(token_features), "explicit")

    def _tiled(self, feats):
        feats = np.asarray(feats, dtype=self.proj.weight.dtype)
        if not 1 <= feats.shape[0]:
            raise ValueError("explicit prompt has no tokens")
        return T.tile_rows(self.proj(T.Tensor(feats)), self.nq)


def tile_index(lt, nq):
    """Row ``i`` of the tiled stream is token ``i mod lt``."""
    return np.arange(nq) % lt
