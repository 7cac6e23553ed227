"""Segmentation training loss (weighted Dice + BCE) and overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.5
    lambda_ce: float = 1.0
    smooth: float = 1.0

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_ce < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_d + self.lambda_ce <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")


class MetricPair(NamedTuple):
    dsc: float
    iou: float


def _target_tensor(target, like: Tensor) -> Tensor:
    t = target if isinstance(target, Tensor) else Tensor(target, dtype=like.dtype)
    if t.shape != like.shape:
        raise T.ShapeError(f"prediction shape {like.shape} != target shape {t.shape}")
    return t


def _sample_axes(ndim: int, batch_axis: Optional[int]):
    if batch_axis is None:
        return None
    return tuple(ax for ax in range(ndim) if ax != batch_axis % ndim)


def _dice(probs: Tensor, target: Tensor, smooth: float, axes) -> Tensor:
    inter = T.reduce("sum", probs * target, axes)
    denom = T.reduce("sum", probs, axes) + T.reduce("sum", target, axes) + smooth
    return 1.0 - (T.scale(inter, 2.0) + smooth) / denom


def _bce(logits: Tensor, target: Tensor, axes) -> Tensor:
    per_pixel = T.softplus(logits) - logits * target
    return T.reduce("mean", per_pixel, axes)


def dice_loss(probs: Tensor, target, smooth: float = 1.0, batch_axis: Optional[int] = None) -> Tensor:
    """Soft Dice loss ``1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)``.

    With ``batch_axis`` set, the loss is computed per sample along that axis
    and averaged.
    """
    target = _target_tensor(target, probs)
    loss = _dice(probs, target, smooth, _sample_axes(probs.ndim, batch_axis))
    return loss if batch_axis is None else T.reduce("mean", loss)


def bce_loss(logits: Tensor, target, batch_axis: Optional[int] = None) -> Tensor:
    """Mean binary cross-entropy from logits: ``max(z,0) - z*t + log(1+exp(-|z|))``."""
    target = _target_tensor(target, logits)
    loss = _bce(logits, target, _sample_axes(logits.ndim, batch_axis))
    return loss if batch_axis is None else T.reduce("mean", loss)


def combined_loss(
    logits: Tensor, target, weights: LossWeights = LossWeights(), batch_axis: Optional[int] = None
) -> Tensor:
    target = _target_tensor(target, logits)
    terms = []
    if weights.lambda_d:
        d = dice_loss(T.sigmoid(logits), target, weights.smooth, batch_axis)
        terms.append(T.scale(d, weights.lambda_d))
    if weights.lambda_ce:
        terms.append(T.scale(bce_loss(logits, target, batch_axis), weights.lambda_ce))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def per_sample_loss(logits: Tensor, target, weights: LossWeights = LossWeights()) -> Tensor:
    """Combined loss for each sample along the leading axis, shape (B,)."""
    target = _target_tensor(target, logits)
    axes = tuple(range(1, logits.ndim))
    dice = _dice(T.sigmoid(logits), target, weights.smooth, axes)
    return T.scale(dice, weights.lambda_d) + T.scale(_bce(logits, target, axes), weights.lambda_ce)


def binarize(logits) -> np.ndarray:
    """Pixel is foreground iff sigmoid(logit) > 0.5, i.e. logit > 0."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (z > 0).astype(np.uint8)


def _as_binary(mask, name: str) -> np.ndarray:
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} mask is not binary")
    return arr.astype(bool)


def _counts(pred, target):
    p = _as_binary(pred, "pred")
    t = _as_binary(target, "target")
    if p.shape != t.shape:
        raise T.ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = int(np.count_nonzero(p & t))
    return inter, int(np.count_nonzero(p)), int(np.count_nonzero(t))


def dsc(pred, target) -> float:
    inter, np_, nt = _counts(pred, target)
    if np_ + nt == 0:
        return 1.0
    return 2.0 * inter / (np_ + nt)


def iou(pred, target) -> float:
    inter, np_, nt = _counts(pred, target)
    union = np_ + nt - inter
    if union == 0:
        return 1.0
    return inter / union


def metric_pair(pred, target) -> MetricPair:
    return MetricPair(dsc(pred, target), iou(pred, target))
