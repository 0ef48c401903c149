# -*- coding: utf-8 -*-
"""Training protocol: AdamW with a per-epoch cosine schedule, gradient
clipping, early stopping on the validation Dice and progressive
fine-tuning on a target domain.

Two precision modes are available. ``high`` runs in float32 with the
deterministic torch algorithms, two runs with the same seed give the same
history. ``reduced`` runs the forward pass under autocast (bfloat16 on
CPU, float16 and a gradient scaler on CUDA).
"""
from __future__ import annotations

import contextlib
import math
import os
import random
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader

from busfusion.checkpoint import CheckpointBundle
from busfusion.dataset import AdaptationSplitSpec, DatasetManifest, Label
from busfusion.exceptions import TrainingError
from busfusion.history import EpochRecord, TrainingHistory
from busfusion.losses import LossConfig, class_weights_from_counts, total_loss
from busfusion.metrics import MetricsReport
from busfusion.transforms import AugmentationConfig, LesionDataset, PreprocessConfig

__all__ = [
    "ADAMW_BETAS",
    "ADAMW_EPS",
    "EarlyStopState",
    "FineTuneResult",
    "TrainConfig",
    "TrainResult",
    "build_optimizer",
    "clip_gradients",
    "clip_model_gradients",
    "cosine_lr",
    "early_stopping_update",
    "evaluate",
    "evaluate_predictor",
    "fine_tune",
    "global_norm",
    "optimizer_step",
    "resolve_device",
    "seed_everything",
    "train",
    "train_step",
]

ADAMW_BETAS = (0.9, 0.999)
ADAMW_EPS = 1e-8

PRECISION_MODES = ("high", "reduced")

# environment variable selecting the default device
DEVICE_ENV = "BUSFUSION_DEVICE"


@dataclass(frozen=True)
class TrainConfig:
    """Options of the ``[train]`` section.

    ``device`` empty means the value of ``BUSFUSION_DEVICE``, then CUDA
    when available, then CPU.
    """

    epochs: int = 50
    patience: int = 10
    lr_init: float = 1e-5
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    grad_clip_norm: float = 0.5
    batch_size: int = 8
    precision: str = "high"
    seed: int = 42
    device: str = ""

    def __post_init__(self):
        for name in ("epochs", "patience", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_init", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lr_min < 0:
            raise ValueError("weight_decay and lr_min must be >= 0")
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.patience > self.epochs:
            raise ValueError("patience must not exceed epochs")
        if self.precision not in PRECISION_MODES:
            raise ValueError(f"precision must be one of {', '.join(PRECISION_MODES)}")

    def to_dict(self) -> dict:
        return asdict(self)


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch generators."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)


def resolve_device(name: str = "") -> torch.device:
    name = name or os.environ.get(DEVICE_ENV, "")
    if not name:
        name = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(name)


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float = 0.0) -> float:
    """Cosine annealing ``lr_min + (lr_max - lr_min)(1 + cos(pi t / T)) / 2``."""
    if total <= 0:
        raise ValueError("total must be positive")
    t = min(max(t, 0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def global_norm(grads: Iterable[torch.Tensor]) -> float:
    """L2 norm of all the gradients seen as one vector."""
    squares = [g.detach().double().pow(2).sum() for g in grads if g is not None]
    if not squares:
        return 0.0
    return float(torch.stack(squares).sum().sqrt())


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float = 0.5) -> List[torch.Tensor]:
    """Scale the gradients by ``max_norm / norm`` when their global norm
    exceeds ``max_norm``.

    :returns: New tensors, the inputs are left untouched.
    """
    norm = global_norm(grads)
    if norm <= max_norm:
        return [g.clone() if g is not None else None for g in grads]
    scale = max_norm / norm
    return [g * scale if g is not None else None for g in grads]


def clip_model_gradients(parameters: Iterable[torch.nn.Parameter], max_norm: float) -> float:
    """In-place version of :func:`clip_gradients` on ``.grad`` attributes.

    :returns: The global norm before clipping.
    """
    grads = [p.grad for p in parameters if p.grad is not None]
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def build_optimizer(parameters, lr: float, weight_decay: float) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay and the standard moments."""
    return torch.optim.AdamW(
        parameters, lr=lr, betas=ADAMW_BETAS, eps=ADAMW_EPS, weight_decay=weight_decay
    )


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float, scaler=None) -> None:
    """Apply one update at learning rate ``lr``."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    if scaler is not None:
        scaler.step(optimizer)
        scaler.update()
    else:
        optimizer.step()


@dataclass
class EarlyStopState:
    best_metric: float = -math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0


def early_stopping_update(
    state: EarlyStopState, val_dice: float, epoch: int, patience: int
) -> Tuple[EarlyStopState, bool]:
    """Track the best validation Dice.

    Only a strictly greater value counts as an improvement.

    :returns: The new state and whether training should stop.
    """
    if val_dice > state.best_metric:
        state = EarlyStopState(best_metric=val_dice, best_epoch=epoch)
    else:
        state = replace(state, epochs_since_improvement=state.epochs_since_improvement + 1)
    return state, state.epochs_since_improvement >= patience


def _autocast(precision: str, device: torch.device):
    if precision != "reduced":
        return contextlib.nullcontext()
    dtype = torch.bfloat16 if device.type == "cpu" else torch.float16
    return torch.autocast(device_type=device.type, dtype=dtype)


def _configure_precision(precision: str) -> None:
    torch.use_deterministic_algorithms(precision == "high", warn_only=True)
    if torch.backends.cudnn.is_available():
        torch.backends.cudnn.benchmark = precision != "high"
        torch.backends.cudnn.deterministic = precision == "high"


def train_step(
    model,
    batch: dict,
    optimizer,
    lr: float,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    class_weights=None,
    ids: Optional[Sequence[str]] = None,
    scaler=None,
) -> Dict[str, float]:
    """Forward, loss, backward, clipping and update on one batch.

    :raises TrainingError: if the loss isn't finite, naming the batch ids.
    :returns: The loss breakdown.
    """
    device = next(model.parameters()).device
    images = batch["image"].to(device)
    masks = batch["mask"].to(device)
    labels = torch.as_tensor(batch["label"], device=device)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    with _autocast(cfg.precision, device):
        out = model(images)
    weights = None if class_weights is None else class_weights.to(device)
    loss, breakdown = total_loss(
        out.seg_probs.float(), masks, out.class_probs.float(), labels, loss_cfg, weights
    )
    if not torch.isfinite(loss):
        raise TrainingError(f"Non-finite loss {float(loss)} on batch {list(ids or [])}")
    if scaler is not None:
        scaler.scale(loss).backward()
        scaler.unscale_(optimizer)
    else:
        loss.backward()
    clip_model_gradients(model.parameters(), cfg.grad_clip_norm)
    optimizer_step(optimizer, lr, scaler)
    return breakdown


def evaluate_predictor(
    predict: Callable[[torch.Tensor], Tuple[torch.Tensor, torch.Tensor]],
    manifest: DatasetManifest,
    preprocess: PreprocessConfig = PreprocessConfig(),
    batch_size: int = 8,
    threshold: float = 0.5,
) -> MetricsReport:
    """Score any predictor returning ``(seg_probs, class_probs)``.

    Masks are binarized at ``threshold``, the predicted class is the
    arg-max (lowest index on ties).
    """
    dataset = LesionDataset(manifest, preprocess)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    ids, pred_masks, gt_masks, preds, truths = [], [], [], [], []
    with torch.no_grad():
        for batch in loader:
            seg_probs, class_probs = predict(batch["image"])
            seg_probs, class_probs = seg_probs.float().cpu(), class_probs.float().cpu()
            pred_masks.extend((seg_probs[:, 0] >= threshold).numpy())
            gt_masks.extend(batch["mask"][:, 0].numpy() > 0.5)
            preds.extend(class_probs.argmax(dim=1).tolist())
            truths.extend(torch.as_tensor(batch["label"]).tolist())
            ids.extend(manifest.records[i].id for i in batch["index"].tolist())
    return MetricsReport.from_predictions(ids, pred_masks, gt_masks, preds, truths)


def evaluate(
    model,
    manifest: DatasetManifest,
    preprocess: PreprocessConfig = PreprocessConfig(),
    batch_size: int = 8,
    precision: str = "high",
) -> MetricsReport:
    """Evaluate a model in eval mode on every record of ``manifest``."""
    device = next(model.parameters()).device
    model.eval()

    def predict(images):
        with _autocast(precision, device):
            out = model(images.to(device))
        return out.seg_probs, out.class_probs

    return evaluate_predictor(predict, manifest, preprocess, batch_size)


def _check_not_test(*manifests: DatasetManifest) -> None:
    for manifest in manifests:
        leaked = [r.id for r in manifest if manifest.split_of(r.id) == "test"]
        if leaked:
            raise TrainingError(f"Training can't use test records: {leaked[:5]}")


def _class_weights(loss_cfg: LossConfig, manifest: DatasetManifest, log: List[str]):
    fixed = loss_cfg.fixed_weights()
    if fixed is not None:
        return torch.tensor(fixed, dtype=torch.float32)
    counts = manifest.class_counts
    try:
        return class_weights_from_counts([counts[label] for label in Label]).float()
    except ValueError:
        log.append(
            "Class weights set to 1: a class has no training image "
            f"({', '.join(f'{k.value}={v}' for k, v in counts.items())})"
        )
        return torch.ones(len(Label), dtype=torch.float32)


@dataclass
class TrainResult:
    """Outcome of :func:`train`.

    :ivar best: Parameters of the best validation epoch.
    :ivar last: Parameters after the last epoch run.
    """

    best: CheckpointBundle
    last: CheckpointBundle
    history: TrainingHistory
    early_stop: EarlyStopState
    class_weights: List[float]
    accessed_ids: List[str] = field(default_factory=list)
    log: List[str] = field(default_factory=list)


def _snapshot(model) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().cpu().clone()) for k, v in model.state_dict().items())


def train(
    model,
    train_manifest: DatasetManifest,
    val_manifest: Optional[DatasetManifest],
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    preprocess: PreprocessConfig = PreprocessConfig(),
    augment: Optional[AugmentationConfig] = AugmentationConfig(),
    history: Optional[TrainingHistory] = None,
    num_workers: int = 0,
    stage: str = "train",
) -> TrainResult:
    """Train ``model`` in place and restore its best weights.

    Every epoch runs the augmented training batches at the cosine learning
    rate of the epoch, then scores the validation split. Without a
    validation split every epoch counts as the best one and no early
    stopping happens.

    :param model: A :class:`~busfusion.model.MultiTaskNet`.
    :param train_manifest: Records to learn from, none assigned to test.
    :param val_manifest: Records driving early stopping, none assigned to test.
    :param cfg: Optimization options.
    :param loss_cfg: Objective options.
    :param preprocess: Resize and normalization options.
    :param augment: Augmentation options, ``None`` to disable.
    :param history: History to append to, observers attached to it are
                    notified of every epoch.
    :param num_workers: DataLoader worker processes.
    :param stage: Stage name stored in the history records.
    :rtype: TrainResult
    """
    val_manifest = val_manifest if val_manifest is not None and len(val_manifest) else None
    _check_not_test(train_manifest, *([val_manifest] if val_manifest else []))
    if not len(train_manifest):
        raise TrainingError("The training split is empty")
    history = history if history is not None else TrainingHistory()
    log: List[str] = []
    seed_everything(cfg.seed)
    _configure_precision(cfg.precision)
    device = resolve_device(cfg.device)
    model.to(device)
    weights = _class_weights(loss_cfg, train_manifest, log)
    dataset = LesionDataset(train_manifest, preprocess, augment, seed=cfg.seed)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=num_workers,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    optimizer = build_optimizer(model.parameters(), cfg.lr_init, cfg.weight_decay)
    scaler = (
        torch.cuda.amp.GradScaler()
        if cfg.precision == "reduced" and device.type == "cuda"
        else None
    )
    state = EarlyStopState()
    best_state, best_epoch = _snapshot(model), 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr_init, cfg.lr_min)
        dataset.set_epoch(epoch)
        totals: Dict[str, float] = {}
        batches = 0
        for batch in loader:
            ids = [train_manifest.records[i].id for i in batch["index"].tolist()]
            breakdown = train_step(
                model, batch, optimizer, lr, cfg, loss_cfg, weights, ids, scaler
            )
            for key, value in breakdown.items():
                totals[key] = totals.get(key, 0.0) + value
            batches += 1
        means = {k: v / batches for k, v in totals.items()}
        stop = False
        if val_manifest is not None:
            report = evaluate(model, val_manifest, preprocess, cfg.batch_size, cfg.precision)
            val_dice, val_acc = report.mean_dice, report.classification.accuracy
            previous_best = state.best_epoch
            state, stop = early_stopping_update(state, val_dice, epoch, cfg.patience)
            improved = state.best_epoch != previous_best
        else:
            val_dice = val_acc = None
            state = EarlyStopState(best_metric=state.best_metric, best_epoch=epoch)
            improved = True
        if improved:
            best_state, best_epoch = _snapshot(model), epoch
        history.log = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=means["total"],
            train_dice_loss=means["dice"],
            train_bce_loss=means["bce"],
            train_cls_loss=means["cls"],
            val_dice=val_dice,
            val_accuracy=val_acc,
            best=improved,
            stage=stage,
        )
        if stop:
            break
    last_state = _snapshot(model)
    model.load_state_dict(best_state)
    common = dict(
        model_config=model.cfg.to_dict(),
        train_config=cfg.to_dict(),
        seed=cfg.seed,
        history=history.to_list(),
        metadata={"stage": stage, "class_weights": weights.tolist()},
    )
    return TrainResult(
        best=CheckpointBundle(state=best_state, epoch=best_epoch, **common),
        last=CheckpointBundle(state=last_state, epoch=epoch, **common),
        history=history,
        early_stop=state,
        class_weights=weights.tolist(),
        accessed_ids=list(dataset.accessed),
        log=log,
    )


@dataclass
class FineTuneResult:
    """One point of the adaptation learning curve."""

    fraction: float
    n_train: int
    report: MetricsReport
    bundle: CheckpointBundle
    zero_shot: bool = False
    log: List[str] = field(default_factory=list)


def fine_tune(
    bundle: CheckpointBundle,
    target: DatasetManifest,
    splits: AdaptationSplitSpec,
    fraction: float,
    cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    preprocess: PreprocessConfig = PreprocessConfig(),
    augment: Optional[AugmentationConfig] = AugmentationConfig(),
    history: Optional[TrainingHistory] = None,
) -> FineTuneResult:
    """Fine-tune a source-domain checkpoint on a fraction of the target.

    All parameters are trained. Fraction ``0`` (or an empty training set)
    skips training and evaluates the checkpoint as is. The point is always
    scored on the held-out records of ``fraction``.

    :param bundle: Source-domain checkpoint.
    :param target: Manifest of the target dataset.
    :param splits: Populated adaptation splits.
    :param fraction: One of ``splits.fractions`` or ``0``.
    :rtype: FineTuneResult
    """
    fraction = float(fraction)
    model = bundle.build_model()
    if fraction == 0:
        train_ids, test_ids = [], list(target.ids)
    else:
        if fraction not in splits.train_ids:
            raise TrainingError(f"No adaptation split for fraction {fraction}")
        train_ids, test_ids = splits.train_ids[fraction], splits.test_ids[fraction]
    log: List[str] = []
    result_bundle = bundle
    if train_ids:
        selected = target.select(train_ids)
        selected = DatasetManifest(
            records=selected.records, split_assignment={i: "train" for i in selected.ids}
        )
        result = train(
            model,
            selected,
            None,
            cfg,
            loss_cfg,
            preprocess,
            augment,
            history=history,
            stage=f"adapt_{fraction:g}",
        )
        log.extend(result.log)
        result_bundle = result.best
    else:
        model.to(resolve_device(cfg.device))
    report = evaluate(model, target.select(test_ids), preprocess, cfg.batch_size, cfg.precision)
    return FineTuneResult(
        fraction=fraction,
        n_train=len(train_ids),
        report=report,
        bundle=result_bundle,
        zero_shot=not train_ids,
        log=log,
    )
