# -*- coding: utf-8 -*-
import numpy as np
import pytest
import torch

from busfusion.exceptions import DatasetError
from busfusion.transforms import (
    AugmentationConfig,
    LesionDataset,
    PreprocessConfig,
    augment_sample,
    normalize_image,
    preprocess_sample,
    resize_sample,
    sample_rng,
    to_tensors,
)


@pytest.fixture
def sample():
    rng = np.random.default_rng(0)
    image = rng.random((48, 40, 3)).astype(np.float32)
    mask = np.zeros((48, 40), dtype=np.uint8)
    mask[10:30, 5:25] = 1
    return image, mask


def test_to_tensors_layout(sample):
    image, mask = to_tensors(*sample)
    assert image.shape == (3, 48, 40)
    assert image.dtype == torch.float32
    assert mask.shape == (48, 40)
    assert mask.dtype == torch.uint8
    with pytest.raises(DatasetError):
        to_tensors(np.zeros((4, 4)))


def test_resize_keeps_binary_mask(sample):
    cfg = PreprocessConfig(target_size=32)
    image, mask = resize_sample(*to_tensors(*sample), cfg)
    assert image.shape == (3, 32, 32)
    assert mask.shape == (32, 32)
    assert set(mask.unique().tolist()) <= {0, 1}
    assert mask.any()


def test_resize_to_same_size_is_identity(sample):
    image, mask = to_tensors(*sample)
    cfg = PreprocessConfig(target_size=48)
    square_image, square_mask = image[:, :, :48].contiguous(), mask[:, :48]
    square_image = torch.nn.functional.pad(square_image, (0, 8))
    square_mask = torch.nn.functional.pad(square_mask, (0, 8))
    out_image, out_mask = resize_sample(square_image, square_mask, cfg)
    assert torch.equal(out_image, square_image)
    assert torch.equal(out_mask, square_mask)


def test_normalization():
    cfg = PreprocessConfig(normalization_mean=(0.5, 0.5, 0.5), normalization_std=(0.25, 0.5, 1.0))
    image = torch.full((3, 2, 2), 0.75)
    out = normalize_image(image, cfg)
    assert out[0, 0, 0].item() == pytest.approx(1.0)
    assert out[1, 0, 0].item() == pytest.approx(0.5)
    assert out[2, 0, 0].item() == pytest.approx(0.25)


def test_preprocess_sample(sample, preprocess64):
    image, mask = preprocess_sample(*sample, preprocess64)
    assert image.shape == (3, 64, 64)
    assert mask.shape == (64, 64)


def test_invalid_preprocess_config():
    with pytest.raises(ValueError):
        PreprocessConfig(target_size=0)
    with pytest.raises(ValueError):
        PreprocessConfig(interpolation="lanczos")


def test_disabled_augmentation_is_identity(sample):
    image, mask = to_tensors(*sample)
    out_image, out_mask = augment_sample(
        image, mask, AugmentationConfig.disabled(), sample_rng(0, 0, 0)
    )
    assert torch.equal(out_image, image)
    assert torch.equal(out_mask, mask)


def test_flip_moves_mask_with_image(sample):
    image, mask = to_tensors(*sample)
    cfg = AugmentationConfig(p_hflip=1.0, p_vflip=0, p_rotate=0, p_jitter=0, p_erase=0)
    out_image, out_mask = augment_sample(image, mask, cfg, sample_rng(0, 0, 0))
    assert torch.equal(out_image, image.flip(-1))
    assert torch.equal(out_mask, mask.flip(-1))


def test_photometric_ops_leave_mask(sample):
    image, mask = to_tensors(*sample)
    cfg = AugmentationConfig(p_hflip=0, p_vflip=0, p_rotate=0, p_jitter=1.0, p_erase=1.0)
    out_image, out_mask = augment_sample(image, mask, cfg, sample_rng(0, 0, 0))
    assert torch.equal(out_mask, mask)
    assert out_image.min() >= 0 and out_image.max() <= 1


def test_rotation_keeps_binary_mask(sample):
    image, mask = to_tensors(*sample)
    cfg = AugmentationConfig(p_hflip=0, p_vflip=0, p_rotate=1.0, p_jitter=0, p_erase=0)
    _, out_mask = augment_sample(image, mask, cfg, sample_rng(1, 2, 3))
    assert out_mask.dtype == torch.uint8
    assert set(out_mask.unique().tolist()) <= {0, 1}


def test_invalid_augmentation_config():
    with pytest.raises(ValueError):
        AugmentationConfig(p_hflip=1.5)
    with pytest.raises(ValueError):
        AugmentationConfig(erase_scale_range=(0.5, 0.2))


class TestLesionDataset:
    def test_items(self, synthetic_manifest, preprocess64):
        dataset = LesionDataset(synthetic_manifest, preprocess64)
        item = dataset[0]
        assert item["image"].shape == (3, 64, 64)
        assert item["mask"].shape == (1, 64, 64)
        assert item["label"] == synthetic_manifest.records[0].label.index
        assert dataset.accessed == [synthetic_manifest.records[0].id]

    def test_samples_depend_on_seed_epoch_index(self, synthetic_manifest, preprocess64):
        augment = AugmentationConfig()
        a = LesionDataset(synthetic_manifest, preprocess64, augment, seed=5)
        b = LesionDataset(synthetic_manifest, preprocess64, augment, seed=5)
        for epoch in (1, 2):
            a.set_epoch(epoch)
            b.set_epoch(epoch)
            for index in (0, 3, 7):
                assert torch.equal(a[index]["image"], b[index]["image"])
                assert torch.equal(a[index]["mask"], b[index]["mask"])
