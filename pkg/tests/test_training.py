# -*- coding: utf-8 -*-
import math
from types import SimpleNamespace

import pytest
import torch
from torch.utils.data import DataLoader

from busfusion import training
from busfusion.checkpoint import CheckpointBundle
from busfusion.dataset import (
    AdaptationSplitSpec,
    DatasetManifest,
    Label,
    make_adaptation_splits,
    stratified_split,
)
from busfusion.exceptions import TrainingError
from busfusion.losses import LossConfig, total_loss
from busfusion.metrics import dice_score
from busfusion.model import build_model
from busfusion.synthetic import make_synthetic_manifest
from busfusion.training import (
    EarlyStopState,
    TrainConfig,
    build_optimizer,
    clip_gradients,
    clip_model_gradients,
    cosine_lr,
    early_stopping_update,
    fine_tune,
    global_norm,
    resolve_device,
    train,
    train_step,
)
from busfusion.transforms import LesionDataset


@pytest.fixture(scope="module")
def split_manifest(synthetic_manifest):
    return stratified_split(synthetic_manifest, seed=0)


def quick_config(**kwargs):
    values = dict(epochs=2, patience=2, lr_init=1e-3, batch_size=4, seed=5, device="cpu")
    values.update(kwargs)
    return TrainConfig(**values)


def test_cosine_lr():
    assert cosine_lr(0, 10, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(10, 10, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(5, 10, 1.0) == pytest.approx(0.5)
    values = [cosine_lr(t, 10, 1.0) for t in range(11)]
    assert values == sorted(values, reverse=True)
    with pytest.raises(ValueError):
        cosine_lr(1, 0, 1.0)


class TestClipping:
    def test_never_increases_norm(self):
        gen = torch.Generator().manual_seed(0)
        for scale in (0.01, 0.1, 1.0, 10.0):
            grads = [torch.randn(5, 3, generator=gen) * scale, torch.randn(7, generator=gen) * scale]
            before = global_norm(grads)
            clipped = clip_gradients(grads, max_norm=0.5)
            after = global_norm(clipped)
            assert after <= before + 1e-9
            assert after <= 0.5 + 1e-6
            if before <= 0.5:
                assert all(torch.equal(a, b) for a, b in zip(grads, clipped))
            else:
                assert after == pytest.approx(0.5, rel=1e-6)

    def test_boundary_is_untouched(self):
        grads = [torch.tensor([0.3, 0.4], dtype=torch.float64)]
        clipped = clip_gradients(grads, max_norm=0.5)
        assert torch.equal(clipped[0], grads[0])

    def test_direction_is_kept(self):
        grads = [torch.tensor([3.0, 4.0])]
        clipped = clip_gradients(grads, max_norm=0.5)
        assert clipped[0].tolist() == pytest.approx([0.3, 0.4])
        assert grads[0].tolist() == [3.0, 4.0]

    def test_in_place_on_parameters(self):
        layer = torch.nn.Linear(3, 2)
        layer.weight.grad = torch.full_like(layer.weight, 10.0)
        layer.bias.grad = torch.full_like(layer.bias, 10.0)
        norm = clip_model_gradients(layer.parameters(), 0.5)
        assert norm == pytest.approx(10.0 * math.sqrt(8))
        assert global_norm([layer.weight.grad, layer.bias.grad]) == pytest.approx(0.5, rel=1e-6)


def test_early_stopping_update():
    state = EarlyStopState()
    stops = []
    for epoch, value in enumerate([0.5, 0.6, 0.6, 0.59, 0.58, 0.7], start=1):
        state, stop = early_stopping_update(state, value, epoch, patience=3)
        stops.append(stop)
        if stop:
            break
    # equal values don't count as an improvement
    assert stops == [False, False, False, False, True]
    assert state.best_epoch == 2
    assert state.best_metric == 0.6


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, patience=5)
    with pytest.raises(ValueError):
        TrainConfig(precision="half")
    with pytest.raises(ValueError):
        TrainConfig(lr_init=1e-5, lr_min=1e-3)
    assert TrainConfig().to_dict()["grad_clip_norm"] == 0.5


def test_resolve_device(monkeypatch):
    monkeypatch.setenv("BUSFUSION_DEVICE", "cpu")
    assert resolve_device().type == "cpu"
    assert resolve_device("cpu").type == "cpu"


def test_early_stopping_halts_after_patience(monkeypatch, tiny_config, split_manifest, preprocess64):
    constant = SimpleNamespace(mean_dice=0.5, classification=SimpleNamespace(accuracy=0.4))
    monkeypatch.setattr(training, "evaluate", lambda *args, **kwargs: constant)
    model = build_model(tiny_config, seed=0)
    result = train(
        model,
        split_manifest.subset("train"),
        split_manifest.subset("val"),
        quick_config(epochs=10, patience=3),
        preprocess=preprocess64,
        augment=None,
    )
    assert len(result.history) == 4
    assert result.best.epoch == 1
    assert result.last.epoch == 4
    assert [r.best for r in result.history] == [True, False, False, False]
    # best weights are restored
    state = model.state_dict()
    assert all(torch.equal(state[k].cpu(), result.best.state[k]) for k in state)


def test_same_seed_same_history(tiny_config, split_manifest, preprocess64):
    histories = []
    for _ in range(2):
        model = build_model(tiny_config, seed=0)
        result = train(
            model,
            split_manifest.subset("train"),
            split_manifest.subset("val"),
            quick_config(),
            preprocess=preprocess64,
        )
        histories.append(result.history.to_list())
    assert histories[0] == histories[1]
    assert len(histories[0]) == 2
    assert set(result.accessed_ids) == set(split_manifest.subset("train").ids)


def test_training_refuses_test_records(tiny_config, synthetic_manifest, preprocess64):
    leaked = DatasetManifest(
        records=synthetic_manifest.records,
        split_assignment={i: "test" for i in synthetic_manifest.ids},
    )
    with pytest.raises(TrainingError, match="test"):
        train(build_model(tiny_config, seed=0), leaked, None, quick_config(), preprocess=preprocess64)


def test_missing_class_uses_uniform_weights(tiny_config, synthetic_manifest, preprocess64):
    lesions = synthetic_manifest.select(
        r.id for r in synthetic_manifest if r.label is not Label.NORMAL
    )
    result = train(
        build_model(tiny_config, seed=0),
        lesions,
        None,
        quick_config(epochs=1, patience=1),
        preprocess=preprocess64,
    )
    assert result.class_weights == [1.0, 1.0, 1.0]
    assert any("Class weights set to 1" in msg for msg in result.log)
    # without validation records every epoch is the best one
    assert result.history[0].val_dice is None
    assert result.best.epoch == 1


def test_overfits_one_batch(tiny_config, synthetic_manifest, preprocess64):
    lesions = [r.id for r in synthetic_manifest if r.label is not Label.NORMAL][:4]
    dataset = LesionDataset(synthetic_manifest.select(lesions), preprocess64)
    batch = next(iter(DataLoader(dataset, batch_size=4)))
    torch.manual_seed(0)
    model = build_model(tiny_config, seed=0)
    cfg = quick_config(lr_init=1e-2, weight_decay=0.0, grad_clip_norm=1.0)
    optimizer = build_optimizer(model.parameters(), cfg.lr_init, cfg.weight_decay)
    best = 0.0
    for step in range(1, 201):
        train_step(model, batch, optimizer, cfg.lr_init, cfg)
        if step % 10 == 0:
            model.train()
            with torch.no_grad():
                probs = model(batch["image"]).seg_probs
            scores = [
                dice_score(p[0].numpy() >= 0.5, m[0].numpy() > 0.5)
                for p, m in zip(probs, batch["mask"])
            ]
            best = max(best, sum(scores) / len(scores))
            if best > 0.95:
                break
    assert best > 0.95


def test_gradient_check(tiny_config, synthetic_manifest, preprocess64):
    dataset = LesionDataset(synthetic_manifest, preprocess64)
    batch = next(iter(DataLoader(dataset, batch_size=2)))
    model = build_model(tiny_config, seed=0).double().eval()
    images = batch["image"].double()
    masks = batch["mask"].double()
    labels = torch.as_tensor(batch["label"])
    loss_cfg = LossConfig()

    def objective():
        out = model(images)
        return total_loss(out.seg_probs, masks, out.class_probs, labels, loss_cfg)[0]

    model.zero_grad()
    objective().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    picked = params[:: max(1, len(params) // 20)]
    assert len(picked) >= 20
    step = 1e-6
    for param in picked:
        flat, grad = param.data.view(-1), param.grad.view(-1)
        index = int(grad.abs().argmax())
        original = flat[index].item()
        with torch.no_grad():
            flat[index] = original + step
            plus = objective().item()
            flat[index] = original - step
            minus = objective().item()
            flat[index] = original
        numeric = (plus - minus) / (2 * step)
        analytic = grad[index].item()
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-7


class TestFineTune:
    @pytest.fixture(scope="class")
    def target(self):
        return make_synthetic_manifest(counts=(2, 4, 4), size=64, seed=1, invert=True)

    @pytest.fixture
    def bundle(self, tiny_model, tiny_config):
        return CheckpointBundle.from_model(tiny_model, tiny_config.to_dict(), seed=0)

    def test_zero_shot(self, bundle, target, preprocess64):
        splits = make_adaptation_splits(target, AdaptationSplitSpec(fractions=(0.5,)), seed=0)
        result = fine_tune(bundle, target, splits, 0, quick_config(), preprocess=preprocess64)
        assert result.zero_shot
        assert result.n_train == 0
        assert len(result.report.ids) == len(target)
        assert result.bundle is bundle

    def test_fraction(self, bundle, target, preprocess64):
        splits = make_adaptation_splits(target, AdaptationSplitSpec(fractions=(0.5,)), seed=0)
        result = fine_tune(
            bundle, target, splits, 0.5, quick_config(epochs=1, patience=1), preprocess=preprocess64
        )
        assert not result.zero_shot
        assert result.n_train == splits.train_size(0.5)
        assert sorted(result.report.ids) == sorted(splits.test_ids[0.5])
        assert result.bundle.metadata["stage"] == "adapt_0.5"

    def test_unknown_fraction(self, bundle, target):
        splits = make_adaptation_splits(target, AdaptationSplitSpec(fractions=(0.5,)), seed=0)
        with pytest.raises(TrainingError):
            fine_tune(bundle, target, splits, 0.2, quick_config())


def test_dice_does_not_drop_with_more_target_data(tiny_config, preprocess64):
    source = make_synthetic_manifest(counts=(0, 8, 8), size=64, seed=3)
    source = DatasetManifest(
        records=source.records, split_assignment={i: "train" for i in source.ids}
    )
    pretrained = train(
        build_model(tiny_config, seed=0),
        source,
        None,
        quick_config(epochs=15, patience=15, lr_init=3e-3),
        preprocess=preprocess64,
        augment=None,
    )
    target = make_synthetic_manifest(counts=(0, 20, 20), size=64, seed=4, invert=True)
    fractions = (0.05, 0.1, 0.2, 0.5)
    splits = make_adaptation_splits(target, AdaptationSplitSpec(fractions=fractions), seed=0)
    assert [splits.train_size(f) for f in fractions] == [2, 4, 8, 20]
    # nested splits, the largest fraction's held-out set is shared by all
    held_out = target.select(splits.test_ids[0.5])
    assert all(set(held_out.ids) <= set(splits.test_ids[f]) for f in fractions)
    cfg = quick_config(epochs=4, patience=4, lr_init=3e-3, batch_size=2)
    dice = []
    for fraction in (0.0,) + fractions:
        point = fine_tune(
            pretrained.best, target, splits, fraction, cfg, preprocess=preprocess64, augment=None
        )
        assert point.zero_shot == (fraction == 0)
        report = training.evaluate(point.bundle.build_model(), held_out, preprocess64)
        dice.append(sum(report.dice) / len(report.dice))
    for smaller, larger in zip(dice, dice[1:]):
        assert larger >= smaller - 0.02, dice
