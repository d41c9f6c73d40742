"""Parameter containers and the transformer building blocks shared by the
encoders and the fusion decoder."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal parameter tree. Public Tensor attributes are parameters;
    constants live in attributes starting with an underscore."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {state[k].shape} != model {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def cast(self, dtype) -> None:
        for p in self.parameters():
            p.data = p.data.astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(trunc_normal(rng, (d_in, d_out)))
        if bias:
            self.bias = param(np.zeros(d_out))
        self._has_bias = bias

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self._has_bias else y

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """C -> 4C -> C with GELU in between."""

    def __init__(self, rng, dim: int, expansion: int = 4):
        self.fc1 = Linear(rng, dim, dim * expansion)
        self.fc2 = Linear(rng, dim * expansion, dim)

    def __call__(self, x):
        if x.shape[-1] != self.fc1.weight.shape[0]:
            raise T.ShapeError(f"mlp expects last axis {self.fc1.weight.shape[0]}, got {x.shape}")
        return self.fc2(T.gelu(self.fc1(x)))

    def zero_(self):
        self.fc1.zero_()
        self.fc2.zero_()


def mlp_block(x, params: MLP):
    return params(x)


def split_heads(x, heads: int):
    B, L, C = x.shape
    return x.reshape(B, L, heads, C // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    B, H, L, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, H * d)


def attend(q, k, v, heads: int, key_pad=None, attn_mask=None, return_weights=False):
    """Scaled dot-product attention over already-projected q/k/v [B, L, C].

    key_pad: bool [B, Lk], True marks keys to ignore.
    attn_mask: bool broadcastable to [B, heads, Lq, Lk], True = blocked.
    """
    C = q.shape[-1]
    if C % heads:
        raise T.ShapeError(f"channels {C} not divisible by heads {heads}")
    d = C // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = T.matmul(qh, T.swapaxes(kh, -1, -2)) * (1.0 / np.sqrt(d))
    mask = None
    if key_pad is not None:
        mask = np.asarray(key_pad, dtype=bool)[:, None, None, :]
    if attn_mask is not None:
        mask = attn_mask if mask is None else (mask | attn_mask)
    w = T.softmax(logits, axis=-1, mask=mask)
    out = merge_heads(T.matmul(w, vh))
    return (out, w) if return_weights else out


class SelfAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self._heads = heads

    def __call__(self, x, key_pad=None, attn_mask=None):
        out = attend(self.q(x), self.k(x), self.v(x), self._heads, key_pad, attn_mask)
        return self.proj(out)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then + mlp(ln(x))."""

    def __init__(self, rng, dim: int, heads: int):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim)

    def __call__(self, x, key_pad=None, attn_mask=None):
        x = x + self.attn(self.norm1(x), key_pad, attn_mask)
        return x + self.mlp(self.norm2(x))

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0.0


def masked_mean(x, pad=None):
    """Mean over axis 1 of [B, L, C], skipping positions where pad is True.

    A row with no valid positions pools to zeros.
    """
    if pad is None:
        return T.mean(x, axis=1)
    valid = (~np.asarray(pad, dtype=bool)).astype(x.dtype)  # [B, L]
    count = np.maximum(valid.sum(axis=1, keepdims=True), 1.0)  # [B, 1]
    w = (valid / count)[:, :, None]
    return T.tsum(x * w, axis=1)
