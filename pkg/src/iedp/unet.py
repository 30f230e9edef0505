"""Cross-attention-conditioned UNet used as a feature extractor at t = 0.

The latent sits at stride 8; three downsampling stages reach stride 64. The
decoder emits one feature tap per resolution (strides 8, 16, 32, 64). Every
cross-attention block records its head-averaged weight map; those maps are
resized to the stride-8 grid and averaged into ``F_CA``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T


class UnsupportedTimestepError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class UNetConfig:
    latent_channels: int = 8
    channels: tuple = (32, 64, 96, 128)  # stride 8, 16, 32, 64
    encoder_attention: tuple = (True, True, False)  # per down stage (strides 8, 16, 32)
    decoder_attention: tuple = (False, True, True)  # per up stage, coarse to fine (strides 32, 16, 8)
    d_cond: int = 64
    attn_dim: int = 32
    heads: int = 2
    time_dim: int = 32

    def validate(self):
        if len(self.channels) != 4:
            raise ConfigError("four channel widths are required (strides 8, 16, 32, 64)")
        if len(self.encoder_attention) != 3 or len(self.decoder_attention) != 3:
            raise ConfigError("attention flags are per stage: three encoder and three decoder entries")
        if not any(self.encoder_attention) or not any(self.decoder_attention):
            raise ConfigError("cross-attention is required in both encoder and decoder halves")
        if self.attn_dim % self.heads:
            raise ConfigError("attn_dim must be divisible by heads")
        return self


def count_cross_attention_blocks(config):
    config.validate()
    return sum(map(bool, config.encoder_attention)), sum(map(bool, config.decoder_attention))


@dataclass
class FeatureBundle:
    f1: T.Tensor  # (B, C1, H/8, W/8)
    f2: T.Tensor
    f3: T.Tensor
    f4: T.Tensor
    f_ca: T.Tensor  # (B, Nq, H/8, W/8)
    attn_maps: list = field(default_factory=list)  # raw per-block maps, (B, HW, Nq)

    @property
    def taps(self):
        return [self.f1, self.f2, self.f3, self.f4]


def timestep_embedding(t, dim, dtype):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)]).astype(dtype)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng)
        self.time = nn.Linear(time_dim, c_out, rng)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x, temb):
        h = self.conv1(T.silu(x))
        h = h + T.reshape(self.time(temb), (1, -1, 1, 1))
        h = self.conv2(T.silu(h))
        return (self.skip(x) if self.skip is not None else x) + h


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross-attention from feature-map pixels to conditioning tokens."""

    def __init__(self, channels, d_cond, attn_dim, heads, rng):
        super().__init__()
        self.ln = nn.LayerNorm(channels)
        self.attn = nn.MultiHeadAttention(channels, d_cond, attn_dim, heads, rng, d_out=channels)

    def forward(self, x, cond):
        B, C, H, W = x.shape
        tokens = x.reshape(B, C, H * W).transpose(0, 2, 1)
        out, weights = self.attn(self.ln(tokens), cond)
        out = out.transpose(0, 2, 1).reshape(B, C, H, W)
        return x + out, weights


class UNet(nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config = (config or UNetConfig()).validate()
        rng = np.random.default_rng(seed)
        c = config.channels
        td = config.time_dim
        self.time_mlp1 = nn.Linear(td, td, rng)
        self.time_mlp2 = nn.Linear(td, td, rng)
        self.conv_in = nn.Conv2d(config.latent_channels, c[0], 3, rng)

        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i in range(3):
            self.down.append(ResBlock(c[i], c[i], td, rng))
            self.down_attn.append(
                CrossAttentionBlock(c[i], config.d_cond, config.attn_dim, config.heads, rng) if config.encoder_attention[i] else _Null()
            )
            self.downsample.append(nn.Conv2d(c[i], c[i + 1], 3, rng, stride=2))
        self.mid = ResBlock(c[3], c[3], td, rng)

        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upconv = nn.ModuleList()
        for j, i in enumerate((2, 1, 0)):
            self.upconv.append(nn.Conv2d(c[i + 1], c[i], 3, rng))
            self.up.append(ResBlock(2 * c[i], c[i], td, rng))
            self.up_attn.append(
                CrossAttentionBlock(c[i], config.d_cond, config.attn_dim, config.heads, rng) if config.decoder_attention[j] else _Null()
            )

    @property
    def n_cross_attention(self):
        return sum(count_cross_attention_blocks(self.config))

    def forward(self, z0, cond, t=0):
        if t != 0:
            raise UnsupportedTimestepError(f"only t=0 feature extraction is supported, got t={t}")
        z0 = z0 if isinstance(z0, T.Tensor) else T.Tensor(np.asarray(z0))
        if z0.ndim == 3:
            z0 = T.reshape(z0, (1,) + z0.shape)
        cond = cond.vectors if hasattr(cond, "vectors") else cond
        if cond.ndim == 2:
            cond = T.reshape(cond, (1,) + cond.shape)
        if cond.shape[-1] != self.config.d_cond:
            raise T.DimensionError(f"conditioning width {cond.shape[-1]} != d_cond {self.config.d_cond}")
        B, _, H8, W8 = z0.shape
        if H8 % 8 or W8 % 8:
            raise T.DimensionError(f"latent extents {H8}x{W8} must be multiples of 8 (image multiple of 64)")

        temb = T.Tensor(timestep_embedding(float(t), self.config.time_dim, self.time_mlp1.weight.dtype)[None])
        temb = self.time_mlp2(T.silu(self.time_mlp1(temb)))

        maps = []
        x = self.conv_in(z0)
        skips = []
        for res, att, ds in zip(self.down, self.down_attn, self.downsample):
            x = res(x, temb)
            x = self._attend(att, x, cond, maps)
            skips.append(x)
            x = ds(x)
        x = self.mid(x, temb)
        taps = [x]  # stride 64
        for upc, res, att in zip(self.upconv, self.up, self.up_attn):
            x = upc(T.upsample_nearest(x, 2))
            x = res(T.concat([x, skips.pop()], axis=1), temb)
            x = self._attend(att, x, cond, maps)
            taps.append(x)
        f4, f3, f2, f1 = taps
        if len(maps) != self.n_cross_attention:
            raise AssertionError(f"captured {len(maps)} attention maps, expected {self.n_cross_attention}")
        nq = cond.shape[-2]
        acc = None
        for w, (h, wd) in maps:
            m = T.reshape(w.transpose(0, 2, 1), (w.shape[0], nq, h, wd))
            if (h, wd) != (H8, W8):
                m = T.resize_bilinear(m, H8, W8)
            acc = m if acc is None else acc + m
        f_ca = acc * (1.0 / len(maps))
        return FeatureBundle(f1, f2, f3, f4, f_ca, [w for w, _ in maps])

    @staticmethod
    def _attend(att, x, cond, maps):
        if isinstance(att, _Null):
            return x
        x, w = att(x, cond)
        maps.append((w, x.shape[-2:]))
        return x


class _Null(nn.Module):
    """Placeholder for stages without cross-attention."""


def unet_forward(unet, z0, cond, t=0):
    return unet(z0, cond, t)
