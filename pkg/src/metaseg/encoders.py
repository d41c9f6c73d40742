"""Toy image/text encoders and the image-text match head.

The image encoder is a shrunken Swin: 4x4 patch embedding, two windowed
attention blocks (the second one shifted), a 2x2 patch merge, two more
blocks. The text encoder is a small BERT-like stack over a fixed 250-token
window. Both emit [B, L, C] token features.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, TransformerBlock, masked_mean, param, trunc_normal
from .tensor import Tensor

TEXT_LEN = 250
PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 4
    window_size: int = 4
    depths: tuple = (2, 2)
    heads: int = 4
    C: int = 64
    vocab_size: int = 512
    text_depth: int = 2
    text_len: int = TEXT_LEN

    def __post_init__(self):
        self.depths = tuple(self.depths)
        if self.C % self.heads:
            raise ValueError(f"C={self.C} not divisible by heads={self.heads}")
        if self.C % 2 or (self.C // 2) % self._stage1_heads:
            raise ValueError(f"C={self.C} must split evenly into the first stage")
        if self.image_size % (self.patch_size * 2):
            raise ValueError(f"image_size {self.image_size} not divisible by {self.patch_size * 2}")

    @property
    def _stage1_heads(self) -> int:
        return max(1, self.heads // 2)

    @property
    def grid(self) -> int:
        """Side length of the output token grid."""
        return self.image_size // (self.patch_size * 2)


@dataclass
class ImageFeature:
    values: Tensor  # [B, L1, C]
    spatial: tuple  # (h, w)

    def __post_init__(self):
        h, w = self.spatial
        if self.values.shape[1] != h * w:
            raise T.ShapeError(f"L1={self.values.shape[1]} != h*w={h * w}")


@dataclass
class TextFeature:
    values: Tensor  # [B, L2, C]
    pad_mask: np.ndarray  # bool [B, L2], True = padding


# --------------------------------------------------------------------------
# tokenizer


def tokenize(text: str) -> list[str]:
    """Lowercase words; whitespace and punctuation are separators."""
    return re.findall(r"[a-z0-9]+", text.lower())


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with [PAD], [UNK]")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls([PAD_TOKEN, UNK_TOKEN] + words)

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in tokenize(text)]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids if i != PAD_ID)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)


# --------------------------------------------------------------------------
# image encoder


def window_shift_mask(h: int, w: int, ws: int, shift: int) -> np.ndarray:
    """Blocked-pair mask for shifted windows, [nW, ws*ws, ws*ws], True = blocked."""
    ids = np.zeros((h, w), dtype=int)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            ids[hs, wsl] = cnt
            cnt += 1
    win = ids.reshape(h // ws, ws, w // ws, ws).transpose(0, 2, 1, 3).reshape(-1, ws * ws)
    return win[:, None, :] != win[:, :, None]


def window_partition(x, ws: int):
    B, h, w, C = x.shape
    x = x.reshape(B, h // ws, ws, w // ws, ws, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B * (h // ws) * (w // ws), ws * ws, C)


def window_reverse(x, ws: int, B: int, h: int, w: int):
    C = x.shape[-1]
    x = x.reshape(B, h // ws, w // ws, ws, ws, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h, w, C)


class WindowBlock(TransformerBlock):
    """Transformer block with attention restricted to (optionally shifted)
    non-overlapping windows of a [B, h, w, C] grid."""

    def __init__(self, rng, dim, heads, window: int, shift: int, resolution: int):
        super().__init__(rng, dim, heads)
        if window >= resolution:
            window, shift = resolution, 0
        elif resolution % window:
            # largest window that tiles the grid
            window = max(d for d in range(1, window + 1) if resolution % d == 0)
            shift = window // 2 if shift else 0
        self._window, self._shift = window, shift
        self._mask = None
        if shift:
            m = window_shift_mask(resolution, resolution, window, shift)
            self._mask = m[:, None, :, :]  # [nW, 1, L, L]

    def __call__(self, x):
        B, h, w, C = x.shape
        ws, s = self._window, self._shift
        y = self.norm1(x)
        if s:
            y = T.roll(y, (-s, -s), (1, 2))
        y = window_partition(y, ws)
        mask = None if self._mask is None else np.tile(self._mask, (B, 1, 1, 1))
        y = self.attn(y, attn_mask=mask)
        y = window_reverse(y, ws, B, h, w)
        if s:
            y = T.roll(y, (s, s), (1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self._cfg = cfg
        c1 = cfg.C // 2
        p = cfg.patch_size
        r1 = cfg.image_size // p
        r2 = r1 // 2
        self.patch = Linear(rng, 3 * p * p, c1)
        self.pos = param(trunc_normal(rng, (1, r1, r1, c1)))
        self.patch_norm = LayerNorm(c1)
        self.stage1 = [WindowBlock(rng, c1, cfg._stage1_heads, cfg.window_size,
                                   (cfg.window_size // 2) if i % 2 else 0, r1)
                       for i in range(cfg.depths[0])]
        self.merge_norm = LayerNorm(4 * c1)
        self.merge = Linear(rng, 4 * c1, cfg.C, bias=False)
        self.stage2 = [WindowBlock(rng, cfg.C, cfg.heads, cfg.window_size,
                                   (cfg.window_size // 2) if i % 2 else 0, r2)
                       for i in range(cfg.depths[1])]
        self.norm = LayerNorm(cfg.C)

    def __call__(self, img) -> ImageFeature:
        cfg = self._cfg
        img = T.as_tensor(img)
        B, ch, H, W = img.shape
        p = cfg.patch_size
        if ch != 3:
            raise T.ShapeError(f"expected 3 channels, got {ch}")
        if H % (2 * p) or W % (2 * p):
            raise T.ShapeError(f"image {H}x{W} not divisible by {2 * p}")
        if H != cfg.image_size or W != cfg.image_size:
            raise T.ShapeError(f"encoder built for {cfg.image_size}px, got {H}x{W}")
        h, w = H // p, W // p
        x = img.reshape(B, 3, h, p, w, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, h, w, 3 * p * p)
        x = self.patch_norm(self.patch(x) + self.pos)
        for blk in self.stage1:
            x = blk(x)
        c1 = x.shape[-1]
        x = x.reshape(B, h // 2, 2, w // 2, 2, c1).transpose(0, 1, 3, 2, 4, 5)
        x = self.merge(self.merge_norm(x.reshape(B, h // 2, w // 2, 4 * c1)))
        for blk in self.stage2:
            x = blk(x)
        x = self.norm(x)
        return ImageFeature(x.reshape(B, (h // 2) * (w // 2), cfg.C), (h // 2, w // 2))


def encode_image(img, encoder: ImageEncoder) -> ImageFeature:
    return encoder(img)


# --------------------------------------------------------------------------
# text encoder


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self._cfg = cfg
        self.tok = param(trunc_normal(rng, (cfg.vocab_size, cfg.C)))
        self.pos = param(trunc_normal(rng, (cfg.text_len, cfg.C)))
        self.blocks = [TransformerBlock(rng, cfg.C, cfg.heads) for _ in range(cfg.text_depth)]
        self.norm = LayerNorm(cfg.C)
        self.frozen = False

    def freeze(self, flag: bool = True) -> None:
        self.frozen = flag
        self.set_requires_grad(not flag)

    def __call__(self, tokens, pad_mask=None) -> TextFeature:
        cfg = self._cfg
        tokens = np.asarray(tokens)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.text_len:
            raise ValueError(f"token array must be [B, {cfg.text_len}], got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id out of vocabulary range [0, {cfg.vocab_size})")
        if pad_mask is None:
            pad_mask = tokens == PAD_ID
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if self.frozen:
            with T.no_grad():
                x = self._forward(tokens, pad_mask)
        else:
            x = self._forward(tokens, pad_mask)
        return TextFeature(x, pad_mask)

    def _forward(self, tokens, pad_mask):
        x = T.embedding(self.tok, tokens) + self.pos
        for blk in self.blocks:
            x = blk(x, key_pad=pad_mask)
        return self.norm(x)


def encode_text(tokens, pad_mask, encoder: TextEncoder) -> TextFeature:
    return encoder(tokens, pad_mask)


def pool_text(feat: TextFeature):
    return masked_mean(feat.values, feat.pad_mask)


def pool_image(feat: ImageFeature):
    return masked_mean(feat.values)


class ItmHead(Module):
    """Two-way match/mismatch logits from a concatenated pooled pair."""

    def __init__(self, rng, C: int):
        self.fc = Linear(rng, 2 * C, 2)

    def __call__(self, pooled_pair):
        return self.fc(pooled_pair)


def itm_head(pooled_pair, head: ItmHead):
    return head(pooled_pair)

