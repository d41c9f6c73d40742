"""Full segmentation model assembly with the three ablation variants.

variant "baseline":  image encoder -> head (no text, loss = CE + dice)
variant "alignment": + cross attention, joint encoding and ITM loss
variant "full":      + channel-wise text prior fusion
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .caf import (AlignmentTrace, CrossAttentionParams, FusionModule, JointEncoder, SegmentHead,
                  align)
from .encoders import EncoderConfig, ImageEncoder, TextEncoder, TextFeature
from .nn import Module
from .objectives import ItmModule, LossBatch, LossReport, cross_entropy, dice_loss, itm_loss, total_loss
from .tensor import Tensor

VARIANTS = ("baseline", "alignment", "full")


@dataclass
class ModelConfig:
    K: int = 5
    variant: str = "full"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0
    tau: float = 0.07
    queue_size: int = 16
    freeze_text_encoder: bool = True

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.K < 2:
            raise ValueError("K must be >= 2")

    @property
    def uses_text(self) -> bool:
        return self.variant != "baseline"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["depths"] = list(d["encoder"]["depths"])
        return d


@dataclass
class ModelOutput:
    logits: Tensor  # [B, K, H, W]
    f_img: object
    f_text: TextFeature | None = None
    trace: AlignmentTrace | None = None


class PromptedSegmenter(Module):
    def __init__(self, cfg: ModelConfig):
        self._cfg = cfg
        ec = cfg.encoder
        rng = np.random.default_rng(cfg.seed)
        self.image_encoder = ImageEncoder(ec, rng)
        L1 = ec.grid ** 2
        if cfg.uses_text:
            self.text_encoder = TextEncoder(ec, rng)
            self.text_encoder.freeze(cfg.freeze_text_encoder)
            self.cross_img = CrossAttentionParams(rng, ec.C, ec.heads)
            self.cross_text = CrossAttentionParams(rng, ec.C, ec.heads)
            self.joint = JointEncoder(rng, ec.C, ec.heads, L1, ec.text_len)
            self.itm = ItmModule(rng, ec.C, cfg.tau, cfg.queue_size)
            if cfg.variant == "full":
                self.fusion = FusionModule(rng, ec.C)
        self.head = SegmentHead(rng, ec.C, cfg.K)
        self._text_cache: dict = {}

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def text_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith("text_encoder.")]

    def encode_text(self, tokens, pad) -> TextFeature:
        """Frozen encoders reuse features per distinct token row."""
        enc = self.text_encoder
        if not enc.frozen:
            return enc(tokens, pad)
        tokens = np.asarray(tokens)
        pad = np.asarray(pad, dtype=bool)
        rows = []
        for t, m in zip(tokens, pad):
            key = (t.tobytes(), m.tobytes(), enc.tok.data.dtype.str)
            if key not in self._text_cache:
                self._text_cache[key] = enc(t[None], m[None]).values.data[0]
            rows.append(self._text_cache[key])
        return TextFeature(Tensor(np.stack(rows)), pad)

    def clear_cache(self):
        self._text_cache.clear()

    def forward(self, images, tokens=None, pad=None) -> ModelOutput:
        images = T.as_tensor(images)
        hw = images.shape[-2:]
        f_img = self.image_encoder(images)
        if not self._cfg.uses_text:
            return ModelOutput(self.head(f_img.values, f_img.spatial, hw), f_img)
        if tokens is None:
            raise ValueError("this variant needs prompt tokens")
        f_text = self.encode_text(tokens, pad)
        trace = align(f_img.values, f_text.values, f_text.pad_mask, self.cross_img, self.cross_text)
        img_j, txt_j = self.joint(trace.f_img_out, trace.f_text_out, f_text.pad_mask)
        x = self.fusion(img_j, txt_j, f_text.pad_mask) if self._cfg.variant == "full" else img_j
        return ModelOutput(self.head(x, f_img.spatial, hw), f_img, f_text, trace)

    __call__ = forward

    def compute_loss(self, images, labels, tokens=None, pad=None, enqueue: bool = True) -> LossReport:
        out = self.forward(images, tokens, pad)
        probs = T.softmax(out.logits, axis=1)
        batch = LossBatch(probs, labels)
        ce, dice = cross_entropy(batch), dice_loss(batch)
        itm = itm_loss(out.f_img, out.f_text, self.itm, enqueue) if self._cfg.uses_text else 0.0
        return total_loss(ce, dice, itm)

    def predict(self, images, tokens=None, pad=None) -> np.ndarray:
        with T.no_grad():
            out = self.forward(images, tokens, pad)
        return out.logits.data.argmax(axis=1)
