# -*- coding: utf-8 -*-
"""The multi-task training objective.

``total = lambda_seg * (dice + bce) + lambda_cls * weighted_ce``

Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before every logarithm.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch

__all__ = [
    "EPS",
    "LossConfig",
    "bce_loss",
    "class_weights_from_counts",
    "dice_loss",
    "segmentation_loss",
    "total_loss",
    "weighted_ce_loss",
]

EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """Options of the ``[loss]`` section.

    ``class_weights`` is either ``auto`` (inverse frequency of the training
    split) or three comma-separated positive numbers.
    """

    lambda_seg: float = 1.0
    lambda_cls: float = 0.5
    dice_smooth: float = 1.0
    class_weights: str = "auto"

    def __post_init__(self):
        if self.lambda_seg < 0 or self.lambda_cls < 0:
            raise ValueError("loss weights must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        self.fixed_weights()

    def fixed_weights(self) -> Optional[Tuple[float, ...]]:
        """The configured class weights, ``None`` for ``auto``."""
        raw = str(self.class_weights).strip()
        if raw.lower() == "auto":
            return None
        try:
            weights = tuple(float(w) for w in raw.split(","))
        except ValueError:
            raise ValueError(f"class_weights must be 'auto' or numbers, got {raw!r}")
        if len(weights) != 3 or any(w <= 0 for w in weights):
            raise ValueError("class_weights needs 3 positive values")
        return weights


def _check_shapes(p, g):
    if p.shape != g.shape:
        raise ValueError(f"Prediction shape {tuple(p.shape)} != target shape {tuple(g.shape)}")


def dice_loss(p: torch.Tensor, g: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss ``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``.

    Batched inputs (``N x ...``) are reduced per sample then averaged.

    :param p: Predicted probabilities.
    :param g: Binary target of the same shape.
    :param smooth: The smoothing term ``eps``.
    """
    _check_shapes(p, g)
    g = g.to(p.dtype)
    if p.ndim >= 3:
        dims = tuple(range(1, p.ndim))
        intersection = (p * g).sum(dims)
        total = p.sum(dims) + g.sum(dims)
    else:
        intersection, total = (p * g).sum(), p.sum() + g.sum()
    return (1.0 - (2.0 * intersection + smooth) / (total + smooth)).mean()


def bce_loss(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged binary cross-entropy on clamped probabilities."""
    _check_shapes(p, g)
    g = g.to(p.dtype)
    p = p.clamp(EPS, 1.0 - EPS)
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def segmentation_loss(p, g, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Unweighted sum of the Dice and BCE losses."""
    return dice_loss(p, g, cfg.dice_smooth) + bce_loss(p, g)


def class_weights_from_counts(counts: Sequence[int]) -> torch.Tensor:
    """Inverse frequency weights ``N / (C * n_c)``.

    :param counts: Number of samples of each class.
    :raises ValueError: if a class has no samples.
    :rtype: torch.Tensor
    """
    counts = [int(c) for c in counts]
    if any(c <= 0 for c in counts):
        raise ValueError(f"Every class needs at least one sample, got counts {counts}")
    total = sum(counts)
    return torch.tensor([total / (len(counts) * c) for c in counts], dtype=torch.float64)


def weighted_ce_loss(probs: torch.Tensor, labels: torch.Tensor, weights=None) -> torch.Tensor:
    """Class-weighted cross-entropy ``-(1/N) sum_i w_{y_i} log p_{i, y_i}``.

    :param probs: ``N x C`` probabilities.
    :param labels: ``N`` class indices or ``N x C`` one-hot rows.
    :param weights: Per-class weights, uniform when ``None``.
    """
    num_classes = probs.shape[1]
    if labels.ndim == 2:
        labels = labels.argmax(dim=1)
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Labels must be in [0, {num_classes - 1}]")
    if weights is None:
        weights = torch.ones(num_classes, dtype=probs.dtype, device=probs.device)
    else:
        weights = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
    picked = probs.gather(1, labels[:, None])[:, 0].clamp(EPS, 1.0 - EPS)
    return -(weights[labels] * torch.log(picked)).mean()


def total_loss(
    seg_probs, seg_target, class_probs, labels, cfg: LossConfig = LossConfig(), weights=None
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Combine the segmentation and classification objectives.

    :returns: The scalar loss and a breakdown with the ``dice``, ``bce``,
              ``seg``, ``cls`` and ``total`` components as floats.
    """
    dice = dice_loss(seg_probs, seg_target, cfg.dice_smooth)
    bce = bce_loss(seg_probs, seg_target)
    seg = dice + bce
    cls = weighted_ce_loss(class_probs, labels, weights)
    total = cfg.lambda_seg * seg + cfg.lambda_cls * cls
    breakdown = {
        "dice": float(dice.detach()),
        "bce": float(bce.detach()),
        "seg": float(seg.detach()),
        "cls": float(cls.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
