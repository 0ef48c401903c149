# -*- coding: utf-8 -*-
"""Interpretability pipelines.

* Attention validation: the finest decoder gate map is upsampled to the
  mask size, binarized with Otsu's threshold, cleaned by a morphological
  opening and compared to the ground truth with the IoU.
* Grad-CAM on the stride-32 fused features, driven by the pre-softmax
  class logit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from busfusion.metrics import iou_score
from busfusion.model import ModelOutput, extract_attention_map

__all__ = [
    "AttentionValidationResult",
    "GradCamResult",
    "InterpretConfig",
    "attention_validation_pipeline",
    "grad_cam",
    "grad_cam_from_gradients",
    "morphological_open",
    "otsu_threshold",
]


@dataclass(frozen=True)
class InterpretConfig:
    """Options of the ``[interpret]`` section.

    ``target_class`` below zero explains the predicted class.
    """

    bins: int = 256
    open_kernel: int = 3
    open_iterations: int = 1
    gate_index: int = -1
    target_class: int = -1

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.open_kernel < 1 or self.open_iterations < 0:
            raise ValueError("open_kernel must be >= 1 and open_iterations >= 0")


def otsu_threshold(values, bins: int = 256) -> Tuple[float, bool]:
    """Otsu's threshold of a map.

    The histogram spans ``[min, max]`` of the values. The threshold is the
    bin edge maximizing the inter-class variance, the lowest edge wins a
    tie. Values greater or equal to it form the foreground.

    :param values: Array of any shape.
    :param bins: Number of histogram buckets.
    :returns: ``(threshold, degenerate)``, a constant map is degenerate and
              its threshold is its value.
    :raises ValueError: on an empty map.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("Cannot threshold an empty map")
    low, high = float(values.min()), float(values.max())
    if low == high:
        return low, True
    hist, edges = np.histogram(values, bins=bins, range=(low, high))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(hist)[:-1]
    w1 = hist.sum() - w0
    s0 = np.cumsum(hist * centers)[:-1]
    s1 = (hist * centers).sum() - s0
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    mu1 = np.divide(s1, w1, out=np.zeros_like(s1), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(edges[int(np.argmax(between)) + 1]), False


def morphological_open(mask, kernel: int = 3, iterations: int = 1) -> np.ndarray:
    """Binary opening with a ``kernel x kernel`` square."""
    mask = np.asarray(mask).astype(bool)
    if iterations == 0:
        return mask
    structure = np.ones((kernel, kernel), dtype=bool)
    return ndimage.binary_opening(mask, structure=structure, iterations=iterations)


@dataclass
class AttentionValidationResult:
    """Every stage of the attention validation of one image."""

    raw: np.ndarray
    upsampled: np.ndarray
    threshold: float
    degenerate: bool
    mask: np.ndarray
    iou: float
    empty_ground_truth: bool

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "degenerate": self.degenerate,
            "iou": self.iou,
            "empty_ground_truth": self.empty_ground_truth,
            "mask_pixels": int(self.mask.sum()),
        }


def attention_validation_pipeline(
    output: ModelOutput, gt_mask, index: int = 0, cfg: InterpretConfig = InterpretConfig()
) -> AttentionValidationResult:
    """Compare a captured gate map against the lesion mask.

    A constant gate map has no foreground. With an empty ground truth the
    IoU is ``1.0`` when the attention mask is empty too and ``0.0``
    otherwise, ``empty_ground_truth`` flags these cases.

    :param output: Forward pass output holding the gate maps.
    :param gt_mask: ``H x W`` binary mask of sample ``index``.
    :param index: Sample of the batch to analyse.
    :param cfg: Interpretation options.
    :rtype: AttentionValidationResult
    """
    gt = np.asarray(gt_mask).astype(bool)
    alpha = extract_attention_map(output, cfg.gate_index)[index, 0].detach().float().cpu()
    upsampled = F.interpolate(
        alpha[None, None], size=gt.shape, mode="bilinear", align_corners=False
    )[0, 0].numpy()
    threshold, degenerate = otsu_threshold(upsampled, cfg.bins)
    binary = np.zeros(gt.shape, dtype=bool) if degenerate else upsampled >= threshold
    mask = morphological_open(binary, cfg.open_kernel, cfg.open_iterations)
    return AttentionValidationResult(
        raw=alpha.numpy(),
        upsampled=upsampled,
        threshold=threshold,
        degenerate=degenerate,
        mask=mask,
        iou=iou_score(mask, gt),
        empty_ground_truth=not gt.any(),
    )


@dataclass
class GradCamResult:
    """Class activation map of one image.

    :ivar weights: Per-channel weights, spatial mean of the gradients.
    :ivar heatmap: ``ReLU(sum_k w_k A_k)`` at feature resolution.
    :ivar overlay: Heatmap upsampled to the image and scaled to ``[0, 1]``.
    :ivar target_class: The explained class.
    """

    weights: np.ndarray
    heatmap: np.ndarray
    overlay: Optional[np.ndarray] = None
    target_class: int = -1


def grad_cam_from_gradients(activations, gradients) -> GradCamResult:
    """Combine feature maps ``K x h x w`` and their gradients."""
    activations = torch.as_tensor(activations, dtype=torch.float64)
    gradients = torch.as_tensor(gradients, dtype=torch.float64)
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ValueError("activations and gradients must both be K x h x w")
    weights = gradients.mean(dim=(1, 2))
    heatmap = torch.relu((weights[:, None, None] * activations).sum(dim=0))
    return GradCamResult(weights=weights.numpy(), heatmap=heatmap.numpy())


def _normalize(heatmap: torch.Tensor) -> torch.Tensor:
    low, high = heatmap.min(), heatmap.max()
    if high <= low:
        return torch.zeros_like(heatmap)
    return (heatmap - low) / (high - low)


def grad_cam(model, image: torch.Tensor, target_class: Optional[int] = None) -> GradCamResult:
    """Grad-CAM of the bottleneck features for one image.

    :param model: A :class:`~busfusion.model.MultiTaskNet`.
    :param image: ``1 x 3 x H x W`` or ``3 x H x W`` normalized image.
    :param target_class: Class to explain, the predicted one when ``None``
                         or negative.
    :raises IndexError: if ``target_class`` is not a valid class.
    :rtype: GradCamResult
    """
    if image.ndim == 3:
        image = image[None]
    device = next(model.parameters()).device
    model.eval()
    with torch.enable_grad():
        out = model(image.to(device))
        num_classes = out.class_logits.shape[1]
        if target_class is None or target_class < 0:
            target_class = int(out.class_probs[0].argmax())
        if not 0 <= target_class < num_classes:
            raise IndexError(f"Class {target_class} out of range for {num_classes} classes")
        features = out.bottleneck_features
        (gradients,) = torch.autograd.grad(out.class_logits[0, target_class], features)
    result = grad_cam_from_gradients(features[0].detach().cpu(), gradients[0].cpu())
    heatmap = torch.from_numpy(result.heatmap)[None, None]
    upsampled = F.interpolate(heatmap, size=image.shape[-2:], mode="bilinear", align_corners=False)
    result.overlay = _normalize(upsampled[0, 0]).numpy()
    result.target_class = target_class
    return result
