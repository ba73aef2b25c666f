"""Training losses: soft Dice, cross-entropy and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    dice: float = 0.5
    ce: float = 0.5

    def __post_init__(self):
        if self.dice < 0 or self.ce < 0:
            raise ValueError("loss weights must be non-negative")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """B x H x W integer labels -> B x K x H x W indicator array."""
    labels = np.asarray(labels)
    out = (labels[:, None] == np.arange(num_classes).reshape(1, -1, *([1] * (labels.ndim - 1))))
    return out.astype(dtype)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return ops.cross_entropy(logits, labels)


def dice_loss(logits: Tensor, labels, smooth: float = 1e-5, include_background: bool = True) -> Tensor:
    """``1 - mean_k (2 sum p_k y_k + s) / (sum p_k + sum y_k + s)`` with sums over the whole batch."""
    k = logits.shape[1]
    probs = ops.softmax(logits, axis=1)
    y = one_hot(labels, k, dtype=logits.dtype)
    axes = (0, 2, 3)
    inter = ops.sum(ops.mul(probs, y), axis=axes)
    denom = ops.add(ops.sum(probs, axis=axes), y.sum(axis=axes) + smooth)
    per_class = ops.div(ops.add(ops.mul(inter, 2.0), smooth), denom)
    weights = np.ones(k, dtype=logits.dtype)
    if not include_background:
        weights[0] = 0
    weights /= weights.sum()
    return ops.sub(1.0, ops.sum(ops.mul(per_class, weights)))


def combined_loss(logits: Tensor, labels, weights: LossWeights = LossWeights(), smooth: float = 1e-5,
                  include_background: bool = True, return_parts: bool = False):
    """``weights.dice * dice + weights.ce * ce``; optionally also returns both parts."""
    dice = dice_loss(logits, labels, smooth, include_background)
    ce = cross_entropy(logits, labels)
    total = ops.add(ops.mul(dice, weights.dice), ops.mul(ce, weights.ce))
    return (total, dice, ce) if return_parts else total
