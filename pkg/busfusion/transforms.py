# -*- coding: utf-8 -*-
"""Preprocessing, augmentation and the torch dataset feeding the model.

Images travel as ``3 x H x W`` float tensors, masks as ``H x W`` ``uint8``
tensors in ``{0, 1}``. Geometric transforms are applied to both, the
photometric ones to the image only. Every random draw comes from an
explicit :class:`numpy.random.Generator` so that a sample is a pure
function of ``(seed, epoch, index)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from busfusion.dataset import DatasetManifest
from busfusion.exceptions import DatasetError

__all__ = [
    "AugmentationConfig",
    "LesionDataset",
    "PreprocessConfig",
    "augment_sample",
    "normalize_image",
    "preprocess_sample",
    "resize_sample",
    "sample_rng",
    "to_tensors",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PreprocessConfig:
    """Options of the ``[preprocess]`` section."""

    target_size: int = 224
    normalization_mean: Tuple[float, ...] = IMAGENET_MEAN
    normalization_std: Tuple[float, ...] = IMAGENET_STD
    interpolation: str = "bicubic"

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if len(self.normalization_mean) != 3 or len(self.normalization_std) != 3:
            raise ValueError("mean and std must have 3 components")
        if any(s <= 0 for s in self.normalization_std):
            raise ValueError("std components must be positive")
        if self.interpolation not in ("bicubic", "bilinear", "nearest"):
            raise ValueError("interpolation must be bicubic, bilinear or nearest")


@dataclass(frozen=True)
class AugmentationConfig:
    """Options of the ``[augment]`` section.

    ``p_jitter`` gates the brightness/contrast jitter so that a
    configuration with every probability at zero is a no-op.
    """

    p_hflip: float = 0.5
    p_vflip: float = 0.3
    p_rotate: float = 0.3
    rotate_degrees: float = 20.0
    p_jitter: float = 1.0
    jitter_factor: float = 0.3
    p_erase: float = 0.2
    erase_scale_range: Tuple[float, ...] = (0.02, 0.33)
    erase_ratio_range: Tuple[float, ...] = (0.3, 3.3)
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_rotate", "p_jitter", "p_erase"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        low, high = self.erase_scale_range
        if not 0 < low <= high < 1:
            raise ValueError("erase_scale_range must lie inside (0, 1)")
        if not 0 <= self.jitter_factor < 1:
            raise ValueError("jitter_factor must be in [0, 1)")
        if self.rotate_degrees < 0:
            raise ValueError("rotate_degrees must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(p_hflip=0, p_vflip=0, p_rotate=0, p_jitter=0, p_erase=0)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample random generator, independent of the worker that runs it."""
    return np.random.default_rng([seed, epoch, index])


def to_tensors(image, mask=None):
    """Convert ``H x W x 3`` / ``H x W`` arrays to the tensor layout.

    :returns: ``(image, mask)`` as ``3 x H x W`` float32 and ``H x W`` uint8.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"image must be H x W x 3, got {image.shape}")
    image_t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    if mask is None:
        mask_t = torch.zeros(image.shape[:2], dtype=torch.uint8)
    else:
        mask_t = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.uint8))
    return image_t, mask_t


def resize_sample(image: torch.Tensor, mask: torch.Tensor, cfg: PreprocessConfig):
    """Resize an image and its mask to ``cfg.target_size`` squared.

    The image uses ``cfg.interpolation``, the mask nearest-neighbour and a
    re-binarization at 0.5. Inputs already at the target size are returned
    unchanged.
    """
    if 0 in image.shape or 0 in mask.shape:
        raise DatasetError("Cannot resize an empty image")
    size = (cfg.target_size, cfg.target_size)
    if tuple(image.shape[-2:]) == size and tuple(mask.shape[-2:]) == size:
        return image, mask
    mode = cfg.interpolation
    kwargs = {} if mode == "nearest" else {"align_corners": False, "antialias": True}
    resized = F.interpolate(image[None].float(), size=size, mode=mode, **kwargs)[0]
    resized = resized.clamp(0.0, 1.0)
    resized_mask = F.interpolate(mask[None, None].float(), size=size, mode="nearest")[0, 0]
    return resized, (resized_mask >= 0.5).to(torch.uint8)


def normalize_image(image: torch.Tensor, cfg: PreprocessConfig) -> torch.Tensor:
    """Channel-wise ``(x - mean) / std``."""
    mean = torch.tensor(cfg.normalization_mean, dtype=image.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.normalization_std, dtype=image.dtype).view(3, 1, 1)
    return (image - mean) / std


def preprocess_sample(image, mask, cfg: PreprocessConfig):
    """Resize and normalize one sample for inference.

    :param image: ``H x W x 3`` array in ``[0, 1]`` or ``3 x H x W`` tensor.
    :param mask: ``H x W`` binary array or tensor, ``None`` for no mask.
    :param cfg: Preprocessing options.
    :returns: ``(image, mask)`` tensors of size ``cfg.target_size``.
    """
    if not torch.is_tensor(image):
        image, mask = to_tensors(image, mask)
    elif mask is None:
        mask = torch.zeros(image.shape[-2:], dtype=torch.uint8)
    image, mask = resize_sample(image, mask, cfg)
    return normalize_image(image, cfg), mask


def _random_erase(image, cfg: AugmentationConfig, rng: np.random.Generator):
    _, height, width = image.shape
    area = height * width
    log_low, log_high = (math.log(r) for r in cfg.erase_ratio_range)
    for _ in range(10):
        target = area * rng.uniform(*cfg.erase_scale_range)
        aspect = math.exp(rng.uniform(log_low, log_high))
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h < height and 0 < w < width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            image = image.clone()
            image[:, top : top + h, left : left + w] = 0.0
            return image
    return image


def augment_sample(image: torch.Tensor, mask: torch.Tensor, cfg: AugmentationConfig, rng):
    """Apply the stochastic training augmentation to one sample.

    Flips and rotation move image and mask together, jitter and erasing
    touch the image only. The image must still be in ``[0, 1]``.

    :param image: ``3 x H x W`` float tensor.
    :param mask: ``H x W`` uint8 tensor.
    :param cfg: Augmentation options.
    :param rng: Per-sample :class:`numpy.random.Generator`.
    :returns: ``(image, mask)``.
    """
    if rng.random() < cfg.p_hflip:
        image, mask = TF.hflip(image), TF.hflip(mask)
    if rng.random() < cfg.p_vflip:
        image, mask = TF.vflip(image), TF.vflip(mask)
    if rng.random() < cfg.p_rotate:
        angle = float(rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees))
        image = TF.rotate(image, angle, interpolation=InterpolationMode.BILINEAR, fill=0.0)
        rotated = TF.rotate(
            mask[None].float(), angle, interpolation=InterpolationMode.NEAREST, fill=0.0
        )
        mask = (rotated[0] >= 0.5).to(torch.uint8)
    if rng.random() < cfg.p_jitter:
        low, high = 1.0 - cfg.jitter_factor, 1.0 + cfg.jitter_factor
        image = TF.adjust_brightness(image, float(rng.uniform(low, high)))
        image = TF.adjust_contrast(image, float(rng.uniform(low, high)))
        image = image.clamp(0.0, 1.0)
    if rng.random() < cfg.p_erase:
        image = _random_erase(image, cfg, rng)
    return image, mask


class LesionDataset(Dataset):
    """Torch dataset over the records of a manifest.

    :param manifest: Records to serve, usually one split.
    :param preprocess: Resize and normalization options.
    :param augment: Augmentation options, ``None`` for evaluation.
    :param seed: Base seed of the per-sample generators.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        preprocess: PreprocessConfig,
        augment: Optional[AugmentationConfig] = None,
        seed: int = 0,
    ):
        self.manifest = manifest
        self.preprocess = preprocess
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        # ids served by this process, in order
        self.accessed = []
        self._cache = {}

    def __len__(self):
        return len(self.manifest)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _resized(self, index):
        if index not in self._cache:
            record = self.manifest.records[index].load()
            image, mask = to_tensors(record.image, record.mask)
            self._cache[index] = resize_sample(image, mask, self.preprocess)
        return self._cache[index]

    def __getitem__(self, index):
        record = self.manifest.records[index]
        self.accessed.append(record.id)
        image, mask = self._resized(index)
        if self.augment is not None:
            rng = sample_rng(self.seed, self.epoch, index)
            image, mask = augment_sample(image, mask, self.augment, rng)
        return {
            "image": normalize_image(image, self.preprocess),
            "mask": mask[None].float(),
            "label": record.label.index,
            "index": index,
        }
