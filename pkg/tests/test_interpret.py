# -*- coding: utf-8 -*-
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from busfusion.interpret import (
    InterpretConfig,
    attention_validation_pipeline,
    grad_cam,
    grad_cam_from_gradients,
    morphological_open,
    otsu_threshold,
)


def between_class_variances(values, bins):
    """Inter-class variance of every split of the histogram, one loop per
    candidate edge."""
    hist, edges = np.histogram(values, bins=bins, range=(values.min(), values.max()))
    centers = (edges[:-1] + edges[1:]) / 2
    scores = []
    for k in range(1, bins):
        w0, w1 = hist[:k].sum(), hist[k:].sum()
        mu0 = (hist[:k] * centers[:k]).sum() / w0 if w0 else 0.0
        mu1 = (hist[k:] * centers[k:]).sum() / w1 if w1 else 0.0
        scores.append(w0 * w1 * (mu0 - mu1) ** 2)
    return np.asarray(scores), edges


class TestOtsu:
    def test_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            bins = int(rng.integers(4, 64))
            values = rng.beta(rng.uniform(0.3, 3), rng.uniform(0.3, 3), size=(12, 12))
            threshold, degenerate = otsu_threshold(values, bins)
            assert not degenerate
            scores, edges = between_class_variances(values.ravel(), bins)
            k = int(np.argmin(np.abs(edges[1:-1] - threshold)))
            assert edges[k + 1] == pytest.approx(threshold)
            assert scores[k] >= scores.max() * (1 - 1e-9)

    def test_bimodal_map(self):
        rng = np.random.default_rng(1)
        values = np.concatenate([rng.normal(0.1, 0.02, 200), rng.normal(0.9, 0.02, 100)])
        threshold, _ = otsu_threshold(values)
        assert values[:200].max() < threshold <= values[200:].min()

    def test_constant_map_is_degenerate(self):
        assert otsu_threshold(np.full((4, 4), 0.3)) == (0.3, True)
        with pytest.raises(ValueError):
            otsu_threshold([])


def test_opening_is_idempotent_and_anti_extensive():
    rng = np.random.default_rng(2)
    for _ in range(100):
        mask = rng.random((16, 16)) < 0.6
        opened = morphological_open(mask, kernel=3)
        assert not (opened & ~mask).any()
        assert np.array_equal(morphological_open(opened, kernel=3), opened)
    assert np.array_equal(morphological_open(mask, iterations=0), mask)


def test_opening_removes_speckles():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:6, 2:6] = True
    mask[8, 8] = True
    opened = morphological_open(mask)
    assert opened[2:6, 2:6].all()
    assert not opened[8, 8]


class TestGradCam:
    def test_hand_fixture(self):
        activations = np.array(
            [[[1.0, 2.0], [3.0, 0.0]], [[2.0, 1.0], [1.0, 0.5]]], dtype=np.float64
        )
        gradients = np.stack([np.ones((2, 2)), -np.ones((2, 2))])
        result = grad_cam_from_gradients(activations, gradients)
        assert result.weights.tolist() == [1.0, -1.0]
        expected = np.maximum(activations[0] - activations[1], 0)
        assert np.allclose(result.heatmap, expected)

    def test_zero_gradients_give_zero_map(self):
        activations = np.random.default_rng(0).random((4, 3, 3))
        result = grad_cam_from_gradients(activations, np.zeros((4, 3, 3)))
        assert not result.heatmap.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            grad_cam_from_gradients(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))

    def test_heatmap_is_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            result = grad_cam_from_gradients(rng.normal(size=(5, 4, 4)), rng.normal(size=(5, 4, 4)))
            assert (result.heatmap >= 0).all()

    def test_on_model(self, tiny_model):
        image = torch.randn(3, 64, 64, generator=torch.Generator().manual_seed(0))
        result = grad_cam(tiny_model, image, target_class=2)
        assert result.target_class == 2
        assert result.heatmap.shape == (2, 2)
        assert result.overlay.shape == (64, 64)
        assert result.overlay.min() >= 0 and result.overlay.max() <= 1
        with pytest.raises(IndexError):
            grad_cam(tiny_model, image, target_class=3)

    def test_predicted_class_by_default(self, tiny_model):
        image = torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            predicted = int(tiny_model(image).class_probs[0].argmax())
        assert grad_cam(tiny_model, image).target_class == predicted


class TestAttentionValidation:
    def test_on_model(self, tiny_model):
        gt = np.zeros((64, 64), dtype=np.uint8)
        gt[20:40, 16:44] = 1
        with torch.no_grad():
            output = tiny_model(torch.randn(1, 3, 64, 64))
        result = attention_validation_pipeline(output, gt, cfg=InterpretConfig(bins=64))
        assert result.raw.shape == (16, 16)
        assert result.upsampled.shape == (64, 64)
        assert result.mask.shape == (64, 64)
        assert 0.0 <= result.iou <= 1.0
        assert not result.empty_ground_truth
        assert set(result.to_dict()) == {
            "threshold",
            "degenerate",
            "iou",
            "empty_ground_truth",
            "mask_pixels",
        }

    def test_constant_gate_map(self):
        output = SimpleNamespace(attention_maps=[torch.full((1, 1, 8, 8), 0.5)])
        gt = np.zeros((8, 8), dtype=bool)
        result = attention_validation_pipeline(output, gt)
        assert result.degenerate
        assert not result.mask.any()
        # empty prediction against an empty ground truth
        assert result.iou == 1.0
        assert result.empty_ground_truth

    def test_gate_map_matching_the_lesion(self):
        alpha = torch.zeros(1, 1, 16, 16)
        alpha[..., 4:12, 4:12] = 1.0
        gt = np.zeros((16, 16), dtype=bool)
        gt[4:12, 4:12] = True
        result = attention_validation_pipeline(SimpleNamespace(attention_maps=[alpha]), gt)
        assert result.iou == 1.0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            InterpretConfig(bins=1)
