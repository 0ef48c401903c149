# -*- coding: utf-8 -*-
"""Synthetic ultrasound-like datasets for smoke runs and tests.

Images are speckled gray backgrounds holding an elliptic lesion. Benign
lesions are smooth ellipses, malignant ones have an irregular border,
normal images have no lesion. The source domain shows bright lesions on a
dark background, the target domain (``invert=True``) the opposite
contrast.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from busfusion import import_export as im_ex
from busfusion.dataset import (
    DatasetManifest,
    ImageRecord,
    Label,
    Source,
    load_busi_manifest,
    load_external_manifest,
)

__all__ = [
    "BENIGN_RGB",
    "MALIGNANT_RGB",
    "make_sample",
    "make_synthetic_manifest",
    "write_synthetic_busi",
    "write_synthetic_external",
]

BENIGN_RGB = (0, 255, 0)
MALIGNANT_RGB = (255, 0, 0)


def _lesion_mask(rng: np.random.Generator, size: int, label: Label) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    ry, rx = rng.uniform(0.12, 0.25, size=2) * size
    angle = np.arctan2(yy - cy, xx - cx)
    radius = np.hypot((yy - cy) / ry, (xx - cx) / rx)
    if label is Label.MALIGNANT:
        # spiculated border
        lobes = int(rng.integers(5, 9))
        radius = radius * (1.0 + 0.25 * np.sin(lobes * angle + rng.uniform(0, 2 * np.pi)))
    return (radius <= 1.0).astype(np.uint8)


def make_sample(
    rng: np.random.Generator, size: int, label: Label, invert: bool = False
) -> Tuple[np.ndarray, np.ndarray]:
    """Draw one image and its binary lesion mask.

    :returns: ``(image, mask)``, an ``H x W x 3`` float image in ``[0, 1]``
              and an ``H x W`` ``uint8`` mask.
    """
    label = Label(label)
    speckle = rng.rayleigh(scale=1.0, size=(size, size))
    background = ndimage.gaussian_filter(speckle, sigma=1.0)
    background = 0.25 + 0.15 * (background - background.mean()) / (background.std() + 1e-8)
    mask = (
        np.zeros((size, size), dtype=np.uint8)
        if label is Label.NORMAL
        else _lesion_mask(rng, size, label)
    )
    lesion_level = 0.8 if label is Label.BENIGN else 0.65
    image = np.where(mask > 0, lesion_level + 0.05 * rng.standard_normal((size, size)), background)
    image = np.clip(image, 0.0, 1.0)
    if invert:
        image = 1.0 - image
    image = np.repeat(image[..., None], 3, axis=2).astype(np.float32)
    return image, mask


def make_synthetic_manifest(
    counts: Sequence[int] = (4, 4, 4),
    size: int = 64,
    seed: int = 0,
    invert: bool = False,
    source: Source = Source.BUSI,
) -> DatasetManifest:
    """In-memory manifest of synthetic records.

    :param counts: Number of normal, benign and malignant images.
    :param size: Side of the square images.
    :param seed: Seed of the generator.
    :param invert: Draw the inverted-contrast domain.
    """
    rng = np.random.default_rng(seed)
    records = []
    for label, count in zip(Label, counts):
        for i in range(1, count + 1):
            image, mask = make_sample(rng, size, label, invert)
            records.append(
                ImageRecord(
                    id=f"{label.value} ({i})", label=label, source=source, image=image, mask=mask
                )
            )
    records.sort(key=lambda r: r.id)
    return DatasetManifest(records=records)


def write_synthetic_busi(root, counts=(4, 4, 4), size=64, seed=0) -> DatasetManifest:
    """Write a BUSI-style directory: ``<root>/<class>/<class> (i).png`` and
    ``<class> (i)_mask.png``.

    Every third lesion image gets its annotation split over a second
    ``_mask_1`` file.

    :returns: The manifest of the written directory.
    :rtype: DatasetManifest
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for label, count in zip(Label, counts):
        folder = root / label.value
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(1, count + 1):
            name = f"{label.value} ({i})"
            image, mask = make_sample(rng, size, label)
            im_ex.write_image(folder / f"{name}.png", image[..., 0])
            if label is not Label.NORMAL and i % 3 == 0:
                rows = np.nonzero(mask.any(axis=1))[0]
                cut = int(rows[len(rows) // 2])
                upper, lower = mask.copy(), mask.copy()
                upper[cut:] = 0
                lower[:cut] = 0
                im_ex.write_image(folder / f"{name}_mask.png", upper)
                im_ex.write_image(folder / f"{name}_mask_1.png", lower)
            else:
                im_ex.write_image(folder / f"{name}_mask.png", mask)
    return load_busi_manifest(root)


def write_synthetic_external(
    root, counts=(2, 4, 4), size=64, seed=1, invert=True
) -> DatasetManifest:
    """Write an external-style directory with RGB-coded masks: green for
    benign, red for malignant, black for normal images.

    :returns: The manifest of the written directory.
    :rtype: DatasetManifest
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for label, count in zip(Label, counts):
        for i in range(1, count + 1):
            name = f"case_{label.value}_{i:03d}"
            image, mask = make_sample(rng, size, label, invert)
            im_ex.write_image(root / "images" / f"{name}.png", image[..., 0])
            colour = MALIGNANT_RGB if label is Label.MALIGNANT else BENIGN_RGB
            rgb = mask[..., None] * np.asarray(colour, dtype=np.uint8)
            im_ex.write_image(root / "masks" / f"{name}.png", rgb.astype(np.uint8))
    return load_external_manifest(root)
