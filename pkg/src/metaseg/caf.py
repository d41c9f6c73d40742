"""Crossmodal attention fusion decoder.

Stages, in order: image-queried cross attention, text-queried cross
attention, joint self-attention over the concatenated sequence, text-prior
channel fusion, and a 1x1 + bilinear x8 segmentation head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, MLP, Module, TransformerBlock, attend, masked_mean, param, trunc_normal
from .tensor import Tensor


class CrossAttentionParams(Module):
    """delta_q / rho_k / rho_v projections, the MLP and its pre-norm."""

    def __init__(self, rng, C: int, heads: int):
        if C % heads:
            raise T.ShapeError(f"C={C} not divisible by heads={heads}")
        self.q_proj = Linear(rng, C, C)
        self.k_proj = Linear(rng, C, C)
        self.v_proj = Linear(rng, C, C)
        self.mlp = MLP(rng, C)
        self.norm = LayerNorm(C)
        self._heads = heads

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def scale(self) -> float:
        """Per-head key dimension d."""
        return self.q_proj.weight.shape[0] // self._heads


@dataclass
class AlignmentTrace:
    f_img_prime: Tensor
    f_img_out: Tensor
    f_text_prime: Tensor
    f_text_out: Tensor


def _check_channels(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise T.ShapeError(f"channel mismatch: {a.shape} vs {b.shape}")


def cross_attend_image(f_img, f_text, params: CrossAttentionParams, text_pad=None):
    """Image queries attend over text keys, then a pre-norm MLP residual.

    Returns (F'_img, F_img_out).
    """
    _check_channels(f_img, f_text)
    att = attend(params.q_proj(f_img), params.k_proj(f_text), params.v_proj(f_text),
                 params.heads, key_pad=text_pad)
    f_prime = f_img + att
    return f_prime, f_prime + params.mlp(params.norm(f_prime))


def cross_attend_text(f_text, f_img_out, params: CrossAttentionParams):
    """Pre-norm MLP residual on the text, then text queries attend over the
    refined image tokens. Returns (F'_text, F_text_out)."""
    _check_channels(f_text, f_img_out)
    f_prime = f_text + params.mlp(params.norm(f_text))
    att = attend(params.q_proj(f_prime), params.k_proj(f_img_out), params.v_proj(f_img_out),
                 params.heads)
    return f_prime, f_prime + att


def align(f_img, f_text, text_pad, img_params, text_params) -> AlignmentTrace:
    ip, io = cross_attend_image(f_img, f_text, img_params, text_pad)
    tp, to = cross_attend_text(f_text, io, text_params)
    return AlignmentTrace(ip, io, tp, to)


class JointEncoder(Module):
    """Two standard transformer blocks over [image tokens ; text tokens] with
    learned modality and position embeddings."""

    def __init__(self, rng, C: int, heads: int, L1: int, L2: int, depth: int = 2):
        self.modality = param(trunc_normal(rng, (2, C)))
        self.pos_img = param(trunc_normal(rng, (L1, C)))
        self.pos_text = param(trunc_normal(rng, (L2, C)))
        self.blocks = [TransformerBlock(rng, C, heads) for _ in range(depth)]

    def __call__(self, f_img, f_text, text_pad=None):
        B, L1, _ = f_img.shape
        L2 = f_text.shape[1]
        if L1 != self.pos_img.shape[0] or L2 != self.pos_text.shape[0]:
            raise T.ShapeError(f"joint encoder built for ({self.pos_img.shape[0]}, "
                               f"{self.pos_text.shape[0]}) tokens, got ({L1}, {L2})")
        img = f_img + self.pos_img + self.modality[0]
        txt = f_text + self.pos_text + self.modality[1]
        x = T.concat([img, txt], axis=1)
        pad = np.zeros((B, L1 + L2), dtype=bool)
        if text_pad is not None:
            pad[:, L1:] = text_pad
        for blk in self.blocks:
            x = blk(x, key_pad=pad)
        return x[:, :L1], x[:, L1:]

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0.0


def joint_encode(f_img_out, f_text_out, encoder: JointEncoder, text_pad=None):
    return encoder(f_img_out, f_text_out, text_pad)


class FusionModule(Module):
    def __init__(self, rng, C: int):
        self.proj = Linear(rng, C, C)

    def prior(self, f_text, text_pad=None):
        return self.proj(masked_mean(f_text, text_pad))

    def __call__(self, f_img, f_text, text_pad=None):
        g = self.prior(f_text, text_pad)
        return fuse_with_prior(f_img, g)


def fuse_with_prior(f_img, g):
    """f_img + f_img * g, with g [B, C] broadcast over tokens."""
    g = T.reshape(g, (g.shape[0], 1, g.shape[1]))
    return f_img + f_img * g


def fuse(f_img_joint, f_text_joint, module: FusionModule, text_pad=None):
    return module(f_img_joint, f_text_joint, text_pad)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] half-pixel bilinear weights.

    Outside the outermost input centres the line through the two nearest
    centres is extended, so affine signals are reproduced exactly everywhere.
    """
    M = np.zeros((n_out, n_in))
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    scale = n_out / n_in
    for i in range(n_out):
        src = (i + 0.5) / scale - 0.5
        i0 = int(np.clip(np.floor(src), 0, n_in - 2))
        t = src - i0
        M[i, i0] = 1.0 - t
        M[i, i0 + 1] = t
    return M


def upsample(x, out_hw):
    """[B, K, h, w] -> [B, K, H, W] separable bilinear."""
    h, w = x.shape[-2:]
    H, W = out_hw
    uh = Tensor(bilinear_matrix(h, H))
    uw = Tensor(bilinear_matrix(w, W).T)
    return T.matmul(T.matmul(uh, x), uw)


class SegmentHead(Module):
    def __init__(self, rng, C: int, K: int):
        self.proj = Linear(rng, C, K)

    def __call__(self, fused, spatial, target_hw):
        B, L1, C = fused.shape
        h, w = spatial
        if L1 != h * w:
            raise T.ShapeError(f"L1={L1} does not match grid {h}x{w}")
        logits = self.proj(fused)  # [B, L1, K]
        K = logits.shape[-1]
        logits = logits.reshape(B, h, w, K).transpose(0, 3, 1, 2)
        return upsample(logits, target_hw)


def segment_head(fused, spatial, head: SegmentHead, target_hw):
    return head(fused, spatial, target_hw)
