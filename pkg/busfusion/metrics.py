# -*- coding: utf-8 -*-
"""Segmentation and classification metrics, and the statistical tests
used to compare runs.

All rates are computed as fractions in ``[0, 1]``; reports render them as
percentages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from busfusion.dataset import Label

__all__ = [
    "SCHEMA_VERSION",
    "ClassMetrics",
    "ClassificationMetrics",
    "ConfusionMatrix",
    "MetricsReport",
    "WilcoxonResult",
    "aggregate_seed_stats",
    "bootstrap_ci",
    "classification_metrics",
    "cohens_d",
    "confusion_matrix",
    "dice_score",
    "iou_score",
    "significance_stars",
    "wilcoxon_signed_rank",
]

SCHEMA_VERSION = 1

# largest sample evaluated with the exact signed-rank distribution
EXACT_WILCOXON_MAX_N = 25


def _as_masks(pred_mask, gt_mask):
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"Mask shapes differ: {pred.shape} != {gt.shape}")
    return pred, gt


def dice_score(pred_mask, gt_mask) -> float:
    """Dice coefficient ``2|P & G| / (|P| + |G|)`` of two binary masks.

    Two empty masks score ``1.0``.
    """
    pred, gt = _as_masks(pred_mask, gt_mask)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou_score(pred_mask, gt_mask) -> float:
    """Jaccard index ``|P & G| / |P | G|``, ``1.0`` for two empty masks."""
    pred, gt = _as_masks(pred_mask, gt_mask)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


@dataclass
class ConfusionMatrix:
    """Counts of true class (rows) against predicted class (columns)."""

    table: np.ndarray
    labels: Tuple[str, ...] = tuple(label.value for label in Label)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.int64)
        n = len(self.labels)
        if self.table.shape != (n, n):
            raise ValueError(f"Confusion matrix must be {n} x {n}")
        if (self.table < 0).any():
            raise ValueError("Confusion matrix entries must be >= 0")

    @property
    def total(self) -> int:
        return int(self.table.sum())

    def to_list(self):
        return self.table.tolist()


def confusion_matrix(preds: Sequence[int], truths: Sequence[int], num_classes: int = 3):
    """Tally predicted against true class indices.

    :rtype: ConfusionMatrix
    """
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise ValueError("preds and truths must have the same length")
    for values in (preds, truths):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise ValueError(f"Class indices must be in [0, {num_classes - 1}]")
    table = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(table, (truths, preds), 1)
    labels = (
        tuple(label.value for label in Label)
        if num_classes == len(Label)
        else tuple(str(i) for i in range(num_classes))
    )
    return ConfusionMatrix(table, labels)


@dataclass
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    # names of the metrics that hit a zero division and were set to 0
    undefined: List[str] = field(default_factory=list)


@dataclass
class ClassificationMetrics:
    per_class: List[ClassMetrics]
    accuracy: float
    precision: float
    recall: float
    f1: float

    def of(self, label: str) -> ClassMetrics:
        for item in self.per_class:
            if item.label == label:
                return item
        raise KeyError(label)


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def classification_metrics(cm: ConfusionMatrix) -> ClassificationMetrics:
    """Per-class and macro-averaged precision, recall and F1.

    A metric whose denominator is zero is defined as ``0`` and its name is
    listed in :attr:`ClassMetrics.undefined`.
    """
    table = cm.table
    per_class = []
    for i, label in enumerate(cm.labels):
        tp = int(table[i, i])
        predicted = int(table[:, i].sum())
        support = int(table[i, :].sum())
        undefined = []
        precision, bad = _ratio(tp, predicted)
        if bad:
            undefined.append("precision")
        recall, bad = _ratio(tp, support)
        if bad:
            undefined.append("recall")
        f1, bad = _ratio(2 * precision * recall, precision + recall)
        if bad:
            undefined.append("f1")
        per_class.append(ClassMetrics(label, precision, recall, f1, support, undefined))
    total = cm.total
    return ClassificationMetrics(
        per_class=per_class,
        accuracy=float(np.trace(table)) / total if total else 0.0,
        precision=float(np.mean([c.precision for c in per_class])),
        recall=float(np.mean([c.recall for c in per_class])),
        f1=float(np.mean([c.f1 for c in per_class])),
    )


def aggregate_seed_stats(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (``n - 1`` denominator).

    A single value has a standard deviation of ``0``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("No values to aggregate")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def bootstrap_ci(
    values: Sequence[float], iterations: int = 1000, level: float = 0.95, seed: int = 0
) -> Tuple[float, float]:
    """Percentile bootstrap confidence interval of the mean.

    Every iteration resamples ``len(values)`` items with replacement.

    :param values: Per-image metric values.
    :param iterations: Number of bootstrap resamples.
    :param level: Confidence level, i.e. ``0.95``.
    :param seed: Seed of the resampling generator.
    :returns: ``(low, high)``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("Cannot bootstrap an empty sample")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, values.size, size=(iterations, values.size))
    means = values[picks].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    return float(low), float(high)


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str
    degenerate: bool = False

    def __iter__(self):
        return iter((self.statistic, self.p_value))


def _exact_signed_rank_p(doubled_ranks: np.ndarray, doubled_w_plus: int) -> float:
    # distribution of the doubled positive rank sum over the 2**n sign patterns
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    lower = counts[: doubled_w_plus + 1].sum()
    upper = counts[doubled_w_plus:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped, tied absolute differences get average
    ranks. Up to 25 non-zero pairs the p-value comes from the exact null
    distribution, above it from the normal approximation with tie-corrected
    variance and a 0.5 continuity correction.

    :param a: First paired sample.
    :param b: Second paired sample.
    :param method: ``auto``, ``exact`` or ``approx``.
    :returns: The statistic ``min(W+, W-)`` and the two-sided p-value.
    :rtype: WilcoxonResult
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("Paired samples must have the same length")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"Unknown method {method!r}")
    diffs = (a - b).ravel()
    diffs = diffs[diffs != 0]
    n = int(diffs.size)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", degenerate=True)
    ranks = stats.rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    statistic = min(w_plus, w_minus)
    if method == "exact" or (method == "auto" and n <= EXACT_WILCOXON_MAX_N):
        doubled = np.rint(ranks * 2).astype(np.int64)
        p = _exact_signed_rank_p(doubled, int(round(w_plus * 2)))
        return WilcoxonResult(statistic, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(diffs), return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    if variance <= 0:
        return WilcoxonResult(statistic, 1.0, n, "approx", degenerate=True)
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(variance)
    p = float(min(1.0, 2.0 * stats.norm.sf(z)))
    return WilcoxonResult(statistic, p, n, "approx")


def cohens_d(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """Standardized mean difference with the pooled standard deviation.

    Returns ``0`` when both the difference and the pooled deviation are
    zero.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if a.size < 1 or b.size < 1 or a.size + b.size < 3:
        raise ValueError("cohens_d needs at least 3 values in total")
    var_a = a.var(ddof=1) if a.size > 1 else 0.0
    var_b = b.var(ddof=1) if b.size > 1 else 0.0
    pooled = math.sqrt(((a.size - 1) * var_a + (b.size - 1) * var_b) / (a.size + b.size - 2))
    diff = float(a.mean() - b.mean())
    if pooled == 0:
        if diff == 0:
            return 0.0
        return math.copysign(math.inf, diff)
    return diff / pooled


def significance_stars(p_value: float) -> str:
    if p_value < 0.001:
        return "***"
    if p_value < 0.01:
        return "**"
    if p_value < 0.05:
        return "*"
    return ""


@dataclass
class MetricsReport:
    """Evaluation of one model (or ensemble) on one split.

    :ivar ids: Image ids in evaluation order.
    :ivar dice: Per-image Dice at threshold 0.5.
    :ivar iou: Per-image IoU at threshold 0.5.
    :ivar lesion: Per-image flag, ``True`` when the ground truth is non-empty.
    :ivar truths: True class indices.
    :ivar preds: Predicted class indices.
    :ivar cm: Confusion matrix.
    :ivar classification: Per-class and macro metrics.
    :ivar seed_stats: Metric name to ``(mean, std)`` across seeds.
    :ivar ci: Metric name to bootstrap ``(low, high)``.
    """

    ids: List[str]
    dice: List[float]
    iou: List[float]
    lesion: List[bool]
    truths: List[int]
    preds: List[int]
    cm: ConfusionMatrix
    classification: ClassificationMetrics
    seed_stats: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    ci: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, ids, pred_masks, gt_masks, preds, truths, num_classes=3):
        """Build a report from binarized masks and class indices."""
        dice, iou, lesion = [], [], []
        for pred, gt in zip(pred_masks, gt_masks):
            dice.append(dice_score(pred, gt))
            iou.append(iou_score(pred, gt))
            lesion.append(bool(np.asarray(gt).any()))
        cm = confusion_matrix(preds, truths, num_classes)
        return cls(
            ids=list(ids),
            dice=dice,
            iou=iou,
            lesion=lesion,
            truths=[int(t) for t in truths],
            preds=[int(p) for p in preds],
            cm=cm,
            classification=classification_metrics(cm),
        )

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else 0.0

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.iou)) if self.iou else 0.0

    @property
    def lesion_dice(self) -> Optional[float]:
        """Mean Dice over the images with a lesion, ``None`` if there are none."""
        values = [d for d, has in zip(self.dice, self.lesion) if has]
        return float(np.mean(values)) if values else None

    @property
    def malignant_recall(self) -> float:
        return self.classification.of(Label.MALIGNANT.value).recall

    def add_confidence_intervals(self, iterations=1000, level=0.95, seed=0):
        for name, values in (("dice", self.dice), ("iou", self.iou)):
            if values:
                self.ci[name] = bootstrap_ci(values, iterations, level, seed)

    def to_dict(self) -> dict:
        """Machine-readable document, rates in percent."""
        cls_metrics = self.classification
        return {
            "schema_version": SCHEMA_VERSION,
            "n_images": len(self.ids),
            "segmentation": {
                "dice": 100 * self.mean_dice,
                "iou": 100 * self.mean_iou,
                "lesion_dice": None if self.lesion_dice is None else 100 * self.lesion_dice,
            },
            "classification": {
                "accuracy": 100 * cls_metrics.accuracy,
                "precision": 100 * cls_metrics.precision,
                "recall": 100 * cls_metrics.recall,
                "f1": 100 * cls_metrics.f1,
                "malignant_recall": 100 * self.malignant_recall
                if len(self.cm.labels) == len(Label)
                else None,
                "per_class": [
                    {
                        "label": c.label,
                        "precision": 100 * c.precision,
                        "recall": 100 * c.recall,
                        "f1": 100 * c.f1,
                        "support": c.support,
                        "undefined": list(c.undefined),
                    }
                    for c in cls_metrics.per_class
                ],
                "confusion_matrix": self.cm.to_list(),
            },
            "seed_stats": {k: list(v) for k, v in self.seed_stats.items()},
            "ci": {k: list(v) for k, v in self.ci.items()},
        }
