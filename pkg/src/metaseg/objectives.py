"""Segmentation losses and the image-text matching objective."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import ImageFeature, ItmHead, TextFeature, pool_image, pool_text
from .nn import Linear, Module
from .tensor import NumericError, Tensor

CLAMP_MIN = 1e-8
DICE_EPS = 1e-6
QUEUE_SIZE = 16
TEMPERATURE = 0.07


@dataclass
class LossBatch:
    predictions: Tensor  # softmax outputs [N, K, H, W]
    targets: np.ndarray  # int [N, H, W]

    def __post_init__(self):
        p, y = self.predictions, np.asarray(self.targets)
        if p.ndim != 4 or y.shape != (p.shape[0],) + p.shape[2:]:
            raise T.ShapeError(f"predictions {p.shape} do not match targets {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
            raise ValueError(f"target ids outside [0, {p.shape[1]})")
        self.targets = y

    @property
    def K(self) -> int:
        return self.predictions.shape[1]

    def onehot(self) -> np.ndarray:
        K = self.K
        return (self.targets[:, None] == np.arange(K)[None, :, None, None]).astype(self.predictions.dtype)


def cross_entropy(batch: LossBatch):
    """Pixel-averaged -sum_k y_k log(yhat_k), with yhat clamped to [1e-8, 1]."""
    y = batch.onehot()
    logp = T.log(T.clamp(batch.predictions, CLAMP_MIN, 1.0))
    return -T.mean(T.tsum(logp * y, axis=1))


def dice_loss(batch: LossBatch):
    """1 - mean over (sample, class) of (2|yhat.y| + eps) / (|yhat| + |y| + eps)."""
    y = batch.onehot()
    p = batch.predictions
    inter = T.tsum(p * y, axis=(2, 3))
    denom = T.tsum(p, axis=(2, 3)) + y.sum(axis=(2, 3)) + DICE_EPS
    ratio = (inter * 2.0 + DICE_EPS) / denom
    return 1.0 - T.mean(ratio)


# --------------------------------------------------------------------------
# image-text matching


class FeatureQueue:
    """FIFO of pooled feature vectors; oldest entries fall out first."""

    def __init__(self, capacity: int = QUEUE_SIZE):
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, vectors) -> None:
        for v in np.atleast_2d(np.asarray(vectors)):
            self._items.append(np.array(v))

    def entries(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, 0))
        return np.stack(self._items)

    def __len__(self):
        return len(self._items)

    def clear(self):
        self._items.clear()


def l2_normalize(x, eps: float = 1e-12):
    return x / T.sqrt(T.tsum(x * x, axis=-1, keepdims=True) + eps)


def infonce(anchors, positives, queue: np.ndarray, tau: float = TEMPERATURE):
    """Mean over rows of -log softmax(anchor_i . [positives ; queue] / tau)[i].

    Inputs are L2-normalised here; queue rows are constants.
    """
    a = l2_normalize(anchors)
    bank = l2_normalize(positives)
    if queue is not None and len(queue):
        qn = queue / np.sqrt((queue * queue).sum(-1, keepdims=True) + 1e-12)
        bank = T.concat([bank, Tensor(qn.astype(a.dtype))], axis=0)
    logits = T.matmul(a, T.transpose(bank)) * (1.0 / tau)
    B = anchors.shape[0]
    lsm = T.log_softmax(logits, axis=-1)
    return -T.mean(lsm[np.arange(B), np.arange(B)])


class ItmModule(Module):
    """Projections, match head and the two feature queues."""

    def __init__(self, rng, C: int, tau: float = TEMPERATURE, queue_size: int = QUEUE_SIZE):
        self.img_proj = Linear(rng, C, C)
        self.txt_proj = Linear(rng, C, C)
        self.head = ItmHead(rng, C)
        self._tau = tau
        self.img_queue = FeatureQueue(queue_size)
        self.txt_queue = FeatureQueue(queue_size)

    def pooled(self, f_img: ImageFeature, f_text: TextFeature):
        return self.img_proj(pool_image(f_img)), self.txt_proj(pool_text(f_text))

    def reset_queues(self):
        self.img_queue.clear()
        self.txt_queue.clear()


def contrastive_term(zi, zt, img_queue: FeatureQueue, txt_queue: FeatureQueue, tau=TEMPERATURE):
    return (infonce(zi, zt, txt_queue.entries() if len(txt_queue) else None, tau)
            + infonce(zt, zi, img_queue.entries() if len(img_queue) else None, tau))


def match_term(zi, zt, head: ItmHead):
    """2-way CE: aligned pairs labelled 1, pairs with text rolled by one
    position inside the batch labelled 0 (skipped for B == 1)."""
    B = zi.shape[0]
    pos = T.concat([zi, zt], axis=1)
    if B > 1:
        neg = T.concat([zi, T.roll(zt, 1, 0)], axis=1)
        pairs = T.concat([pos, neg], axis=0)
        labels = np.r_[np.ones(B, int), np.zeros(B, int)]
    else:
        pairs, labels = pos, np.ones(1, int)
    lsm = T.log_softmax(head(pairs), axis=-1)
    return -T.mean(lsm[np.arange(len(labels)), labels])


def itm_loss(f_img: ImageFeature, f_text: TextFeature, module: ItmModule, enqueue: bool = True):
    """Contrastive (with queued negatives) + match cross-entropy.

    The current batch's projected features are enqueued afterwards.
    """
    if f_img.values.shape[-1] != f_text.values.shape[-1]:
        raise T.ShapeError(f"channel mismatch: {f_img.values.shape} vs {f_text.values.shape}")
    zi, zt = module.pooled(f_img, f_text)
    loss = contrastive_term(zi, zt, module.img_queue, module.txt_queue, module._tau) \
        + match_term(zi, zt, module.head)
    if enqueue:
        module.img_queue.push(zi.data)
        module.txt_queue.push(zt.data)
    return loss


# --------------------------------------------------------------------------
# total


@dataclass
class LossReport:
    ce: float
    dice: float
    itm: float
    total: float
    tensor: Tensor | None = None  # differentiable total


def total_loss(ce, dice, itm=0.0) -> LossReport:
    """Unweighted sum ce + dice + itm."""
    parts = []
    for name, v in (("ce", ce), ("dice", dice), ("itm", itm)):
        val = float(v.data) if isinstance(v, Tensor) else float(v)
        if not math.isfinite(val):
            raise NumericError(f"non-finite {name} loss: {val}")
        parts.append(val)
    total = T.as_tensor(ce) + dice + itm
    return LossReport(parts[0], parts[1], parts[2], float(total.data), total)
