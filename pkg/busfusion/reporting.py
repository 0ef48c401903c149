# -*- coding: utf-8 -*-
"""Run directories, metrics tables, learning curves and comparisons.

Tables are `tablib.Dataset` instances, written as csv, json or rst with
:func:`busfusion.import_export.export_table`. Machine-readable documents
carry ``schema_version``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import tablib

from busfusion.__version__ import __version__
from busfusion.exceptions import BusfusionError
from busfusion.import_export import export_table
from busfusion.metrics import (
    SCHEMA_VERSION,
    MetricsReport,
    aggregate_seed_stats,
    significance_stars,
    wilcoxon_signed_rank,
)

__all__ = [
    "FILES",
    "LearningCurvePoint",
    "RunManifest",
    "compare_runs",
    "compare_per_image",
    "learning_curve_table",
    "metrics_tables",
    "per_image_table",
    "prepare_run_dir",
    "read_per_image",
    "seed_summary",
    "write_metrics",
]

FILES = {
    "run_manifest": "run_manifest.json",
    "config": "config.ini",
    "history": "history.jsonl",
    "best": "best.ckpt",
    "last": "last.ckpt",
    "metrics": "metrics.json",
    "metrics_table": "metrics.rst",
    "per_image": "per_image.csv",
    "classification": "classification.csv",
    "learning_curve": "learning_curve.csv",
    "learning_curve_json": "learning_curve.json",
    "learning_curve_plot": "learning_curve.png",
    "interpret": "interpret.json",
    "interpret_table": "interpret.csv",
    "comparison": "comparison.rst",
    "comparison_table": "comparison.csv",
    "comparison_xlsx": "comparison.xlsx",
    "manifest": "manifest.csv",
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance of one run directory."""

    command: str
    config: Dict[str, Dict[str, str]]
    dataset_fingerprint: str = ""
    seeds: List[int] = field(default_factory=list)
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""
    extra: Dict[str, object] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def finish(self) -> None:
        self.finished = _now()

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / FILES["run_manifest"]
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", "utf8")
        return path

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        path = Path(run_dir) / FILES["run_manifest"]
        try:
            return cls(**json.loads(path.read_text("utf8")))
        except (OSError, ValueError, TypeError) as err:
            raise BusfusionError(f"Invalid run manifest {path}: {err}")


def prepare_run_dir(run_dir, force: bool = False) -> Path:
    """Create a run directory, refusing to reuse one without ``force``.

    :raises BusfusionError: if the directory already holds a run manifest
                            and ``force`` is not set.
    """
    run_dir = Path(run_dir)
    if (run_dir / FILES["run_manifest"]).exists() and not force:
        raise BusfusionError(f"{run_dir} already holds a run, use --force to overwrite it")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _pct(value) -> str:
    return "" if value is None else f"{100 * value:.2f}"


def metrics_tables(report: MetricsReport) -> Tuple[tablib.Dataset, tablib.Dataset]:
    """Overall and per-class tables, rates in percent.

    :returns: ``(overall, per_class)``.
    """
    cls_metrics = report.classification
    overall = tablib.Dataset(headers=["metric", "value", "mean", "std", "ci_low", "ci_high"])
    rows = [
        ("dice", report.mean_dice),
        ("iou", report.mean_iou),
        ("lesion_dice", report.lesion_dice),
        ("accuracy", cls_metrics.accuracy),
        ("precision", cls_metrics.precision),
        ("recall", cls_metrics.recall),
        ("f1", cls_metrics.f1),
        ("malignant_recall", report.malignant_recall),
    ]
    for name, value in rows:
        mean, std = report.seed_stats.get(name, (None, None))
        low, high = report.ci.get(name, (None, None))
        overall.append([name, _pct(value), _pct(mean), _pct(std), _pct(low), _pct(high)])
    per_class = tablib.Dataset(headers=["class", "precision", "recall", "f1", "support", "undefined"])
    for c in cls_metrics.per_class:
        per_class.append(
            [c.label, _pct(c.precision), _pct(c.recall), _pct(c.f1), c.support, ";".join(c.undefined)]
        )
    return overall, per_class


def per_image_table(report: MetricsReport) -> tablib.Dataset:
    table = tablib.Dataset(headers=["id", "dice", "iou", "lesion", "truth", "pred"])
    for row in zip(report.ids, report.dice, report.iou, report.lesion, report.truths, report.preds):
        image_id, dice, iou, lesion, truth, pred = row
        table.append([image_id, repr(float(dice)), repr(float(iou)), int(lesion), truth, pred])
    return table


def read_per_image(path) -> Dict[str, Tuple[float, float]]:
    """Read a ``per_image.csv`` file.

    :returns: Map image id -> ``(dice, iou)``.
    """
    try:
        text = Path(path).read_text("utf8")
        table = tablib.Dataset().load(text, format="csv")
        return {row["id"]: (float(row["dice"]), float(row["iou"])) for row in table.dict}
    except (OSError, KeyError, ValueError) as err:
        raise BusfusionError(f"Invalid per-image log {path}: {err}")


def compare_per_image(a: Dict[str, Tuple[float, float]], b: Dict[str, Tuple[float, float]]):
    """Wilcoxon test of the Dice of the images present in both logs."""
    common = [i for i in a if i in b]
    if not common:
        raise BusfusionError("The per-image logs have no image in common")
    return wilcoxon_signed_rank([a[i][0] for i in common], [b[i][0] for i in common])


def seed_summary(reports: Sequence[MetricsReport]) -> Dict[str, Tuple[float, float]]:
    """Mean and sample std across seeds of the headline metrics."""
    values = {
        "dice": [r.mean_dice for r in reports],
        "iou": [r.mean_iou for r in reports],
        "accuracy": [r.classification.accuracy for r in reports],
        "precision": [r.classification.precision for r in reports],
        "recall": [r.classification.recall for r in reports],
        "f1": [r.classification.f1 for r in reports],
        "malignant_recall": [r.malignant_recall for r in reports],
    }
    return {name: aggregate_seed_stats(v) for name, v in values.items()}


def write_metrics(run_dir, report: MetricsReport, extra: Optional[dict] = None) -> List[Path]:
    """Write metrics.json, metrics.rst, per_image.csv and classification.csv."""
    run_dir = Path(run_dir)
    document = report.to_dict()
    document.update(extra or {})
    paths = [run_dir / FILES[k] for k in ("metrics", "metrics_table", "per_image", "classification")]
    paths[0].write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", "utf8")
    overall, per_class = metrics_tables(report)
    export_table(overall, paths[1], "rst")
    export_table(per_image_table(report), paths[2])
    export_table(per_class, paths[3])
    return paths


@dataclass
class LearningCurvePoint:
    """One row of the adaptation learning curve.

    :ivar recovery: Dice as a percentage of the source-domain reference.
    """

    fraction: float
    n_train_images: int
    dice_mean: float
    dice_std: float
    accuracy_mean: float
    accuracy_std: float
    recovery: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError("fraction must be in [0, 1]")

    @classmethod
    def from_values(cls, fraction, n_train, dice, accuracy, reference=None):
        """Aggregate per-seed values of one fraction."""
        dice_mean, dice_std = aggregate_seed_stats(dice)
        acc_mean, acc_std = aggregate_seed_stats(accuracy)
        recovery = 100 * dice_mean / reference if reference else None
        return cls(fraction, n_train, dice_mean, dice_std, acc_mean, acc_std, recovery)


def learning_curve_table(points: Sequence[LearningCurvePoint]) -> tablib.Dataset:
    headers = [
        "fraction",
        "n_train_images",
        "dice_mean",
        "dice_std",
        "accuracy_mean",
        "accuracy_std",
        "recovery",
    ]
    table = tablib.Dataset(headers=headers)
    for p in points:
        table.append(
            [
                p.fraction,
                p.n_train_images,
                round(p.dice_mean, 6),
                round(p.dice_std, 6),
                round(p.accuracy_mean, 6),
                round(p.accuracy_std, 6),
                "" if p.recovery is None else round(p.recovery, 2),
            ]
        )
    return table


def _load_run(run_dir: Path):
    document = json.loads((run_dir / FILES["metrics"]).read_text("utf8"))
    if document.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"schema_version {document.get('schema_version')!r}")
    per_image = read_per_image(run_dir / FILES["per_image"])
    return document, per_image


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.2f}"


def compare_runs(run_dirs: Sequence) -> Tuple[tablib.Dataset, List[str]]:
    """Merge the metrics of several evaluated run directories.

    The first valid run is the baseline: every other run is compared to it
    with a Wilcoxon test over the per-image Dice and marked with ``*``,
    ``**`` or ``***`` for p below 0.05, 0.01 and 0.001. Directories without
    valid metrics are skipped with a warning.

    :returns: The comparison table and the warnings.
    :raises BusfusionError: if no directory holds valid metrics.
    """
    log: List[str] = []
    runs = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        try:
            runs.append((run_dir, *_load_run(run_dir)))
        except (OSError, ValueError, KeyError, BusfusionError) as err:
            log.append(f"Skipped {run_dir}: {err}")
    if not runs:
        raise BusfusionError("No valid run directory to compare")
    headers = [
        "run",
        "n_images",
        "dice",
        "dice_ci",
        "iou",
        "lesion_dice",
        "accuracy",
        "f1",
        "malignant_recall",
        "p_value",
        "significance",
    ]
    table = tablib.Dataset(headers=headers)
    baseline = runs[0][2]
    for i, (run_dir, document, per_image) in enumerate(runs):
        seg, cls_metrics = document["segmentation"], document["classification"]
        ci = document.get("ci", {}).get("dice")
        p_value, stars = "", ""
        if i:
            result = compare_per_image(per_image, baseline)
            p_value, stars = f"{result.p_value:.4g}", significance_stars(result.p_value)
        table.append(
            [
                run_dir.name,
                document["n_images"],
                _fmt(seg["dice"]),
                "" if not ci else f"[{100 * ci[0]:.2f}, {100 * ci[1]:.2f}]",
                _fmt(seg["iou"]),
                _fmt(seg.get("lesion_dice")),
                _fmt(cls_metrics["accuracy"]),
                _fmt(cls_metrics["f1"]),
                _fmt(cls_metrics.get("malignant_recall")),
                p_value,
                stars,
            ]
        )
    return table, log
