# -*- coding: utf-8 -*-
"""Figures rendered with `matplotlib` on the Agg backend.

The callers write the plotted numbers next to every figure (learning
curve table, interpretation sidecars) so that it can be redrawn without
running the models again.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["PANEL_COLUMNS", "save_learning_curve", "save_panel"]

PANEL_COLUMNS = ("Image", "Ground truth", "Prediction", "Attention", "Grad-CAM")


def save_panel(
    path,
    image,
    gt_mask,
    pred_mask,
    attention,
    gradcam,
    attention_iou: Optional[float] = None,
    dice: Optional[float] = None,
    title: str = "",
) -> Path:
    """Side by side panel of one image: input, ground truth, predicted
    mask, attention map and Grad-CAM overlay.

    :param path: Destination PNG file.
    :param image: ``H x W x 3`` image in ``[0, 1]``.
    :param attention: Upsampled gate map in ``[0, 1]``.
    :param gradcam: Normalized Grad-CAM map in ``[0, 1]``.
    :returns: The path of the written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray = np.asarray(image)[..., 0]
    fig, ax = plt.subplots(1, len(PANEL_COLUMNS), figsize=(18, 4))
    ax[0].imshow(gray, cmap="gray", vmin=0, vmax=1)
    ax[1].imshow(gt_mask, cmap="gray", vmin=0, vmax=1)
    ax[2].imshow(pred_mask, cmap="gray", vmin=0, vmax=1)
    ax[3].imshow(attention, cmap="viridis", vmin=0, vmax=1)
    ax[4].imshow(gray, cmap="gray", vmin=0, vmax=1)
    ax[4].imshow(gradcam, cmap="jet", alpha=0.45, vmin=0, vmax=1)
    titles = list(PANEL_COLUMNS)
    if dice is not None:
        titles[2] += f" (Dice {dice:.3f})"
    if attention_iou is not None:
        titles[3] += f" (IoU {attention_iou:.3f})"
    for axis, name in zip(ax, titles):
        axis.set_title(name)
        axis.axis("off")
    if title:
        fig.suptitle(title)
    plt.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def save_learning_curve(
    path, fractions: Sequence[float], dice: Sequence[float], dice_std=None, reference=None
) -> Path:
    """Plot Dice against the fraction of target images used for
    fine-tuning, with the source-domain reference as a dashed line.

    :returns: The path of the written PNG file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    percent = [100 * f for f in fractions]
    std = list(dice_std) if dice_std is not None else [0.0] * len(dice)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(percent, dice, yerr=std, marker="o", capsize=3, label="fine-tuned")
    if reference is not None:
        ax.axhline(reference, linestyle="--", color="gray", label="source reference")
    ax.set_xlabel("Target training images (%)")
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1)
    ax.legend()
    plt.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
