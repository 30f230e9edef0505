"""Frozen feature producers: a stride-8 latent encoder and a tiny image/text
dual encoder trained contrastively on synthetic (image, caption) pairs."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import nn
from . import tensor as T
from .optim import AdamW

log = logging.getLogger(__name__)

PAD, START, END = "<pad>", "<start>", "<end>"
SPECIALS = (PAD, START, END)


class UnknownTokenError(KeyError):
    pass


class Vocabulary:
    """Closed word-level vocabulary; ids 0-2 are pad/start/end."""

    def __init__(self, words, max_len=16):
        words = sorted(set(words) - set(SPECIALS))
        self.itos = list(SPECIALS) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.max_len = max_len
        self.warnings = []

    def __len__(self):
        return len(self.itos)

    @property
    def words(self):
        return self.itos[len(SPECIALS):]

    def tokenize(self, prompt):
        """Whitespace-split ``prompt`` into ids wrapped in start/end tokens.

        Prompts longer than ``max_len`` are truncated (the end token is kept)
        and a warning is recorded in ``self.warnings``.
        """
        ids = [self.stoi[START]]
        for w in prompt.split():
            if w not in self.stoi or w in SPECIALS:
                raise UnknownTokenError(f"word {w!r} not in vocabulary")
            ids.append(self.stoi[w])
        ids.append(self.stoi[END])
        if len(ids) > self.max_len:
            msg = f"prompt truncated from {len(ids)} to {self.max_len} tokens: {prompt!r}"
            self.warnings.append(msg)
            log.warning(msg)
            ids = ids[: self.max_len - 1] + [self.stoi[END]]
        return ids

    def detokenize(self, ids):
        return " ".join(self.itos[i] for i in ids if self.itos[i] not in SPECIALS)

    def pad(self, ids):
        """Pad to ``max_len``; returns (ids array, boolean mask of real tokens)."""
        out = np.zeros(self.max_len, dtype=np.int64)
        out[: len(ids)] = ids
        mask = np.zeros(self.max_len, dtype=bool)
        mask[: len(ids)] = True
        return out, mask

    def save(self, path):
        Path(path).write_text("".join(w + "\n" for w in self.words))

    @classmethod
    def load(cls, path, max_len=16):
        return cls([w for w in Path(path).read_text().splitlines() if w], max_len=max_len)


# ------------------------------------------------------------ latent ------

class LatentEncoder(nn.Module):
    """Fixed random three-stage strided conv stack; (3, H, W) -> (C, H/8, W/8)."""

    def __init__(self, channels=8, seed=1234):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.c1 = nn.Conv2d(3, 16, 3, rng, stride=2)
        self.c2 = nn.Conv2d(16, 32, 3, rng, stride=2)
        self.c3 = nn.Conv2d(32, channels, 3, rng, stride=2)
        self.channels = channels
        self.assign_names("latent.")
        self.freeze()

    def forward(self, images):
        x = T.tanh(self.c1(images) * 2.0)
        x = T.tanh(self.c2(x) * 2.0)
        return self.c3(x)


def encode_latent(encoder, image):
    """Noise-free stride-8 latent ``z0`` of one image (3, H, W) or a batch."""
    image = np.asarray(image)
    batched = image.ndim == 4
    x = image if batched else image[None]
    if x.shape[-1] % 8 or x.shape[-2] % 8:
        raise T.DimensionError(f"image extents must be multiples of 8, got {x.shape[-2:]}")
    with T.no_grad():
        z = encoder(T.Tensor(x.astype(T.get_default_dtype()))).data
    return z if batched else z[0]


# -------------------------------------------------------------- towers ----

class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d, heads, rng):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = nn.MultiHeadAttention(d, d, d, heads, rng)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, 2 * d, rng)

    def forward(self, x, bias=None):
        h = self.ln1(x)
        a, _ = self.attn(h, h, bias=bias)
        x = x + a
        return x + self.ffn(self.ln2(x))


def l2_normalize(x, eps=1e-12):
    return x / T.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)


class ImageTower(nn.Module):
    """Strided conv stem (one stride-2 stage per factor of two in ``patch``)
    followed by a transformer block over the patch grid."""

    def __init__(self, d=64, patch=8, image_size=64, heads=4, rng=None):
        super().__init__()
        stages = int(round(math.log2(patch)))
        if 2**stages != patch or image_size % patch:
            raise ValueError(f"patch must be a power of two dividing the image size, got {patch} for {image_size}")
        self.patch, self.image_size = patch, image_size
        self.grid = image_size // patch
        widths = [3] + [max(16, d // 2 ** (stages - 1 - i)) for i in range(stages - 1)] + [d]
        self.stem = nn.ModuleList([nn.Conv2d(widths[i], widths[i + 1], 3, rng, stride=2) for i in range(stages)])
        self.pos = nn.Parameter(rng.normal(0, 0.02, (self.grid * self.grid, d)).astype(T.get_default_dtype()))
        self.block = Block(d, heads, rng)
        self.ln = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d, rng, bias=False)

    @property
    def num_patches(self):
        return self.grid * self.grid

    def forward(self, images):
        images = np.asarray(images, dtype=T.get_default_dtype())
        B, _, H, W = images.shape
        if (H, W) != (self.image_size, self.image_size):
            raise T.DimensionError(f"image tower expects {self.image_size}x{self.image_size}, got {H}x{W}")
        x = T.Tensor(images)
        for i, conv in enumerate(self.stem):
            x = conv(x)
            if i < len(self.stem) - 1:
                x = T.silu(x)
        x = x.transpose(0, 2, 3, 1).reshape(B, self.num_patches, -1)
        x = self.ln(self.block(x + self.pos))
        pooled = l2_normalize(self.proj(x.mean(axis=1)))
        return x, pooled


class TextTower(nn.Module):
    def __init__(self, vocab_size, d=64, max_len=16, heads=4, rng=None):
        super().__init__()
        dt = T.get_default_dtype()
        self.tok = nn.Parameter(rng.normal(0, 0.3, (vocab_size, d)).astype(dt))
        self.pos = nn.Parameter(rng.normal(0, 0.02, (max_len, d)).astype(dt))
        self.block = Block(d, heads, rng)
        self.ln = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d, rng, bias=False)

    def forward(self, ids, mask):
        """ids, mask: (B, L). Returns token features (B, L, d) and pooled (B, d)."""
        x = T.getitem(self.tok, ids) + self.pos
        bias = np.where(mask[:, None, None, :], 0.0, -1e9).astype(x.dtype)
        x = self.ln(self.block(x, bias=bias))
        w = (mask / mask.sum(axis=1, keepdims=True)).astype(x.dtype)[:, :, None]
        pooled = l2_normalize(self.proj((x * w).sum(axis=1)))
        return x, pooled


class DualEncoder(nn.Module):
    """Image/text towers with a shared embedding width and a learned temperature."""

    def __init__(self, vocab, d=64, patch=8, image_size=64, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab = vocab
        self.d = d
        self.image = ImageTower(d, patch, image_size, rng=rng)
        self.text = TextTower(len(vocab), d, vocab.max_len, rng=rng)
        self.log_scale = nn.Parameter(np.array(math.log(1 / 0.07), dtype=T.get_default_dtype()))
        self.assign_names("clip.")

    @property
    def temperature(self):
        return float(np.exp(-self.log_scale.data))

    def encode_ids(self, prompts):
        rows = [self.vocab.pad(self.vocab.tokenize(p)) for p in prompts]
        return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows])

    def logits(self, images, prompts):
        _, img = self.image(images)
        ids, mask = self.encode_ids(prompts)
        _, txt = self.text(ids, mask)
        scale = T.exp(T.clip_max(self.log_scale, math.log(100.0)))
        return T.matmul(img, txt.transpose(1, 0)) * scale


def encode_image_clip(dual, image):
    """Frozen image tower: (patch features (Np, D), unit-norm pooled (D,)) for
    one image, or batched arrays for a (B, 3, H, W) input."""
    image = np.asarray(image, dtype=T.get_default_dtype())
    batched = image.ndim == 4
    with T.no_grad():
        feats, pooled = dual.image(image if batched else image[None])
    if batched:
        return feats.data, pooled.data
    return feats.data[0], pooled.data[0]


def encode_text_clip(dual, prompt):
    """Frozen text tower on one prompt.

    Returns (token features (L_max, D), pooled (D,), mask (L_max,)); the mask
    marks the real (start, words, end) tokens.
    """
    ids, mask = dual.vocab.pad(dual.vocab.tokenize(prompt))
    with T.no_grad():
        feats, pooled = dual.text(ids[None], mask[None])
    return feats.data[0], pooled.data[0], mask


def info_nce(logits):
    """Symmetric InfoNCE with the diagonal as positives."""
    n = logits.shape[0]
    eye = np.eye(n, dtype=logits.dtype)
    li = -(T.log_softmax(logits, axis=1) * eye).sum() * (1.0 / n)
    lt = -(T.log_softmax(logits, axis=0) * eye).sum() * (1.0 / n)
    return (li + lt) * 0.5


@dataclass
class PretrainConfig:
    iters: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    eval_batches: int = 8


def _distinct_caption_batches(captions, batch_size, n_batches, rng):
    """Held-out evaluation batches whose captions are pairwise distinct."""
    order = rng.permutation(len(captions))
    batches, cur, used = [], [], set()
    for i in order:
        if captions[i] in used:
            continue
        cur.append(int(i))
        used.add(captions[i])
        if len(cur) == batch_size:
            batches.append(cur)
            cur, used = [], set()
            if len(batches) == n_batches:
                break
    if not batches and len(cur) >= 2:
        batches.append(cur)  # small held-out sets: one short batch
    return batches


def retrieval_chance(batches, batch_size):
    """Expected top-1 accuracy of a random ranker over ``batches``."""
    total = sum(len(b) for b in batches)
    return len(batches) / total if total else 1.0 / batch_size


def retrieval_accuracy(dual, images, captions, batches):
    """Top-1 image->text retrieval within each batch; chance is 1/batch_size."""
    hits = total = 0
    with T.no_grad():
        for b in batches:
            lg = dual.logits(images[b], [captions[i] for i in b]).data
            hits += int((lg.argmax(axis=1) == np.arange(len(b))).sum())
            total += len(b)
    return hits / max(total, 1)


def class_separation(dual, images, class_sets):
    """Mean pooled-image cosine for same-class-set pairs and for disjoint pairs."""
    _, pooled = encode_image_clip(dual, images)
    sims = pooled @ pooled.T
    same, disjoint = [], []
    n = len(class_sets)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = set(class_sets[i]), set(class_sets[j])
            if a == b:
                same.append(sims[i, j])
            elif not a & b:
                disjoint.append(sims[i, j])
    return (float(np.mean(same)) if same else float("nan"), float(np.mean(disjoint)) if disjoint else float("nan"))


def contrastive_pretrain(dual, images, captions, config=PretrainConfig(), eval_images=None, eval_captions=None):
    """Train both towers with symmetric InfoNCE, then freeze them.

    Returns a report dict with chance level and top-1 retrieval before and
    after training on the held-out pairs.
    """
    rng = np.random.default_rng(config.seed)
    if eval_images is None:
        eval_images, eval_captions = images, captions
    batches = _distinct_caption_batches(eval_captions, config.batch_size, config.eval_batches, np.random.default_rng(config.seed + 1))
    report = {
        "batch_size": config.batch_size,
        "chance": retrieval_chance(batches, config.batch_size),
        "iters": config.iters,
        "top1_retrieval_init": retrieval_accuracy(dual, eval_images, eval_captions, batches),
        "skipped_batches": 0,
    }
    opt = AdamW(dual.named_parameters(), weight_decay=config.weight_decay)
    losses = []
    n = len(images)
    for it in range(config.iters):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        caps = [captions[i] for i in idx]
        if len(set(caps)) < 2:
            report["skipped_batches"] += 1
            log.warning("batch %d has fewer than two distinct captions; skipped", it)
            continue
        opt.zero_grad()
        loss = info_nce(dual.logits(images[idx], caps))
        loss.backward()
        lr = config.lr * 0.5 * (1 + math.cos(math.pi * it / config.iters))
        opt.step(lr)
        losses.append(float(loss.data))
    dual.freeze()
    report["init_loss"] = losses[0] if losses else None
    report["final_loss"] = float(np.mean(losses[-50:])) if losses else None
    report["top1_retrieval"] = retrieval_accuracy(dual, eval_images, eval_captions, batches)
    report["eval_pairs"] = sum(len(b) for b in batches)
    return dual, report


def save_dual_encoder(dual, ckpt_path, vocab_path):
    checkpoint.save(ckpt_path, dual.state_dict("clip."))
    dual.vocab.save(vocab_path)


def load_dual_encoder(ckpt_path, vocab_path, d=64, patch=8, image_size=64):
    vocab = Vocabulary.load(vocab_path)
    dual = DualEncoder(vocab, d, patch, image_size)
    dual.load_state_dict(checkpoint.load(ckpt_path), prefix="clip.")
    return dual.freeze()
