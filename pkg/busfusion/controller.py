# -*- coding: utf-8 -*-
"""Core module. Contains the main controller class.

The controller turns a parsed configuration into runs: it loads the
datasets, builds the models, calls the training, evaluation and
interpretation code and writes every artifact of a run directory.
"""
from __future__ import annotations

import dataclasses
import json
import math
import re
from pathlib import Path
from pprint import pformat
from typing import List, Optional, Sequence

import numpy as np
import tablib
import torch

from busfusion.checkpoint import load_checkpoint, save_checkpoint
from busfusion.config import BusfusionConfig
from busfusion.dataset import (
    AdaptationSplitSpec,
    DatasetManifest,
    dataset_fingerprint,
    load_busi_manifest,
    load_external_manifest,
    make_adaptation_splits,
    read_manifest,
    save_manifest,
    stratified_split,
)
from busfusion.ensemble import Ensemble
from busfusion.exceptions import ConfigError, DatasetError
from busfusion.figures import save_learning_curve, save_panel
from busfusion.history import TrainingHistory
from busfusion.import_export import export_table, export_worksheet
from busfusion.interpret import attention_validation_pipeline, grad_cam
from busfusion.metrics import dice_score
from busfusion.model import build_model, count_parameters
from busfusion.reporting import (
    FILES,
    LearningCurvePoint,
    RunManifest,
    compare_per_image,
    compare_runs,
    learning_curve_table,
    prepare_run_dir,
    read_per_image,
    seed_summary,
    write_metrics,
)
from busfusion.synthetic import write_synthetic_busi, write_synthetic_external
from busfusion.training import (
    evaluate,
    evaluate_predictor,
    fine_tune,
    resolve_device,
    train,
)
from busfusion.transforms import normalize_image, resize_sample, to_tensors

__all__ = ["new_controller", "Controller"]


def new_controller(config: object, overrides: Optional[Sequence[str]] = None) -> "Controller":
    """Controller class factory

    :param config: Path of the INI file.
    :param overrides: ``section.key=value`` strings.
    :returns: An instance of Controller
    :rtype: Controller
    """
    return Controller(conf=BusfusionConfig(config, overrides=overrides))


def _file_stem(record_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", record_id).strip("_")


class Controller:
    """Run orchestration for one configuration.

    :param conf: The parsed configuration.
    """

    def __init__(self, conf: BusfusionConfig) -> None:
        if conf is None:
            raise ValueError
        self.setup(conf)

    def setup(self, conf) -> None:
        self._ini = conf
        self._log_file = conf.path("log_file")
        self._history_file: Optional[Path] = None
        # warnings echoed by the CLI
        self.log: List[str] = []

    def update(self, history, record):
        "Observer pattern"
        record = record.to_dict()
        if self._history_file is not None:
            with open(self._history_file, mode="a", encoding="utf8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if self._log_file:
            with open(self._log_file, mode="a", encoding="utf8") as f:
                f.write(pformat(record) + "\n")

    def section(self, name: str):
        seen = len(self._ini.log)
        record = self._ini.section_config(name)
        self.log.extend(self._ini.log[seen:])
        return record

    def _run_manifest(self, command: str, manifest=None, seeds=(), **extra) -> RunManifest:
        return RunManifest(
            command=command,
            config=self._ini.resolved(),
            dataset_fingerprint=dataset_fingerprint(manifest) if manifest is not None else "",
            seeds=list(seeds),
            extra=extra,
        )

    def _default_run_dir(self, name: str) -> Path:
        return (self._ini.path("runs") or Path("runs")) / name

    # datasets

    def _dataset_root(self, key: str) -> Path:
        root = self._ini.require_path(key)
        if not root.is_dir():
            raise ConfigError(f"paths.{key} = {root} is not a directory.")
        return root

    def load_dataset(self, dataset: Optional[str] = None) -> DatasetManifest:
        """Manifest of the configured BUSI or external dataset.

        A manifest file declared in ``[paths]`` wins over the directory
        scan. BUSI records without a split are split on the fly with the
        ``[data]`` fractions.
        """
        data_cfg = self.section("data")
        dataset = dataset or data_cfg.dataset
        if dataset == "busi":
            path = self._ini.path("manifest")
            if path is not None and path.exists():
                manifest = read_manifest(path, data_cfg.black_threshold)
            else:
                manifest = load_busi_manifest(
                    self._dataset_root("busi_root"), data_cfg.black_threshold
                )
            if not manifest.split_assignment:
                manifest = stratified_split(manifest, data_cfg.fractions, data_cfg.split_seed)
        elif dataset == "external":
            path = self._ini.path("external_manifest")
            if path is not None and path.exists():
                manifest = read_manifest(path, data_cfg.black_threshold)
            else:
                manifest = load_external_manifest(
                    self._dataset_root("external_root"), data_cfg.black_threshold
                )
        else:
            raise ConfigError(f"Unknown dataset {dataset!r}, use busi or external")
        self.log.extend(manifest.log)
        if not len(manifest):
            raise DatasetError(f"The {dataset} dataset is empty")
        return manifest

    def split(self, run_dir=None, force=False) -> Path:
        """Write the stratified split of the BUSI dataset.

        :returns: Path of the written ``manifest.csv``.
        """
        data_cfg = self.section("data")
        run_dir = prepare_run_dir(run_dir or self._default_run_dir("split"), force)
        manifest = load_busi_manifest(
            self._dataset_root("busi_root"), data_cfg.black_threshold
        )
        self.log.extend(manifest.log)
        manifest = stratified_split(manifest, data_cfg.fractions, data_cfg.split_seed)
        path = run_dir / FILES["manifest"]
        save_manifest(manifest, path)
        run = self._run_manifest(
            "split", manifest, [data_cfg.split_seed], split_sizes=manifest.split_sizes()
        )
        run.finish()
        run.write(run_dir)
        return path

    # training

    def _start_history(self, run_dir: Path) -> TrainingHistory:
        self._history_file = run_dir / FILES["history"]
        self._history_file.write_text("", encoding="utf8")
        history = TrainingHistory()
        history.attach(self)
        return history

    def train(self, run_dir=None, force=False):
        """Train one model on the train split, early stopping on val.

        :returns: The run directory and the :class:`TrainResult`.
        """
        train_cfg = self.section("train")
        run_dir = prepare_run_dir(run_dir or self._default_run_dir("train"), force)
        manifest = self.load_dataset()
        model = build_model(self.section("model"), seed=train_cfg.seed)
        history = self._start_history(run_dir)
        try:
            result = train(
                model,
                manifest.subset("train"),
                manifest.subset("val"),
                train_cfg,
                self.section("loss"),
                self.section("preprocess"),
                self.section("augment"),
                history=history,
                num_workers=self.section("data").num_workers,
            )
        finally:
            history.detach(self)
            self._history_file = None
        self.log.extend(result.log)
        save_checkpoint(result.best, run_dir / FILES["best"])
        save_checkpoint(result.last, run_dir / FILES["last"])
        self._ini.write(run_dir / FILES["config"])
        run = self._run_manifest(
            "train",
            manifest,
            [train_cfg.seed],
            parameters=count_parameters(model),
            best_epoch=result.early_stop.best_epoch,
            best_val_dice=(
                result.early_stop.best_metric
                if math.isfinite(result.early_stop.best_metric)
                else None
            ),
            epochs_run=len(result.history),
            class_weights=result.class_weights,
            class_weights_source="train split",
            split_sizes=manifest.split_sizes(),
        )
        run.finish()
        run.write(run_dir)
        return run_dir, result

    def train_ensemble(self, run_dir=None, force=False):
        """Train one model per seed of the ``[ensemble]`` section.

        Each member gets its own run directory ``seed_<seed>`` below
        ``run_dir``.

        :returns: The member run directories.
        """
        run_dir = Path(run_dir or self._default_run_dir("ensemble"))
        members = []
        train_options = self._ini.options.setdefault("train", {})
        original = train_options.get("seed")
        try:
            for seed in self.section("ensemble").seeds:
                self._ini.set("train.seed", seed)
                member_dir, _ = self.train(run_dir / f"seed_{seed}", force)
                members.append(member_dir)
        finally:
            if original is None:
                train_options.pop("seed", None)
            else:
                train_options["seed"] = original
        return members

    # evaluation

    def _eval_manifest(self, dataset: Optional[str], split: str) -> DatasetManifest:
        manifest = self.load_dataset(dataset)
        if manifest.split_assignment and split != "all":
            manifest = manifest.subset(split)
        if not len(manifest):
            raise DatasetError(f"No record in the {split} split")
        return manifest

    def evaluate(
        self,
        checkpoints: Sequence,
        run_dir=None,
        dataset: Optional[str] = None,
        split: str = "test",
        ci: bool = False,
        compare=None,
        force=False,
    ):
        """Evaluate one checkpoint or an ensemble of checkpoints.

        With several checkpoints every member is also evaluated alone and
        the mean and std across members are stored with the ensemble
        metrics.

        :returns: The run directory and the :class:`MetricsReport`.
        """
        if not checkpoints:
            raise ConfigError("At least one checkpoint is required")
        train_cfg = self.section("train")
        preprocess = self.section("preprocess")
        run_dir = prepare_run_dir(run_dir or self._default_run_dir("eval"), force)
        manifest = self._eval_manifest(dataset, split)
        device = resolve_device(train_cfg.device)
        bundles = [load_checkpoint(p) for p in checkpoints]
        if len(bundles) == 1:
            model = bundles[0].build_model().to(device)
            report = evaluate(
                model, manifest, preprocess, train_cfg.batch_size, train_cfg.precision
            )
        else:
            ensemble = Ensemble.from_checkpoints(bundles, self.section("ensemble"))
            ensemble.to(device).eval()
            members = [
                evaluate(m, manifest, preprocess, train_cfg.batch_size, train_cfg.precision)
                for m in ensemble.members
            ]

            def predict(images):
                out = ensemble(images.to(device))
                return out.seg_probs, out.class_probs

            report = evaluate_predictor(predict, manifest, preprocess, train_cfg.batch_size)
            report.seed_stats = seed_summary(members)
        if ci:
            report.add_confidence_intervals(seed=train_cfg.seed)
        extra = {}
        if compare is not None:
            other = read_per_image(Path(compare) / FILES["per_image"])
            mine = {i: (d, u) for i, d, u in zip(report.ids, report.dice, report.iou)}
            result = compare_per_image(mine, other)
            extra["comparison"] = {
                "run": str(compare),
                "statistic": result.statistic,
                "p_value": result.p_value,
                "n": result.n,
                "method": result.method,
                "degenerate": result.degenerate,
            }
        write_metrics(run_dir, report, extra)
        run = self._run_manifest(
            "eval",
            manifest,
            [b.seed for b in bundles],
            checkpoints=[str(p) for p in checkpoints],
            split=split,
        )
        run.finish()
        run.write(run_dir)
        return run_dir, report

    # domain adaptation

    def adapt(
        self,
        checkpoint,
        run_dir=None,
        fractions: Optional[Sequence[float]] = None,
        seeds: Optional[Sequence[int]] = None,
        reference: Optional[float] = None,
        force=False,
    ):
        """Zero-shot evaluation and progressive fine-tuning on the external
        dataset.

        :param checkpoint: Source-domain checkpoint.
        :param fractions: Fine-tuning fractions, the ``[data]`` ones by default.
        :param seeds: Fine-tuning seeds, the ``[train]`` seed by default.
        :param reference: Source-domain Dice for the recovery column.
        :returns: The run directory and the learning-curve points.
        """
        data_cfg, train_cfg = self.section("data"), self.section("train")
        run_dir = prepare_run_dir(run_dir or self._default_run_dir("adapt"), force)
        bundle = load_checkpoint(checkpoint)
        target = self.load_dataset("external")
        fractions = [
            float(f) for f in (data_cfg.adaptation_fractions if fractions is None else fractions)
        ]
        positive = tuple(sorted({f for f in fractions if f > 0}))
        splits = make_adaptation_splits(
            target, AdaptationSplitSpec(fractions=positive), data_cfg.adaptation_seed
        )
        self.log.extend(splits.log)
        seeds = list(seeds) if seeds else [train_cfg.seed]
        history = self._start_history(run_dir)
        points = []
        try:
            zero = fine_tune(bundle, target, splits, 0.0, train_cfg, preprocess=self.section("preprocess"))
            points.append(
                LearningCurvePoint.from_values(
                    0.0,
                    0,
                    [zero.report.mean_dice],
                    [zero.report.classification.accuracy],
                    reference,
                )
            )
            for fraction in positive:
                dice, accuracy = [], []
                for seed in seeds:
                    result = fine_tune(
                        bundle,
                        target,
                        splits,
                        fraction,
                        dataclasses.replace(train_cfg, seed=seed),
                        self.section("loss"),
                        self.section("preprocess"),
                        self.section("augment"),
                        history=history,
                    )
                    self.log.extend(result.log)
                    dice.append(result.report.mean_dice)
                    accuracy.append(result.report.classification.accuracy)
                points.append(
                    LearningCurvePoint.from_values(
                        fraction, splits.train_size(fraction), dice, accuracy, reference
                    )
                )
        finally:
            history.detach(self)
            self._history_file = None
        table = learning_curve_table(points)
        export_table(table, run_dir / FILES["learning_curve"])
        export_table(table, run_dir / FILES["learning_curve_json"], "json")
        save_learning_curve(
            run_dir / FILES["learning_curve_plot"],
            [p.fraction for p in points],
            [p.dice_mean for p in points],
            [p.dice_std for p in points],
            reference,
        )
        run = self._run_manifest(
            "adapt",
            target,
            seeds,
            checkpoint=str(checkpoint),
            fractions=[0.0, *positive],
            reference=reference,
        )
        run.finish()
        run.write(run_dir)
        return run_dir, points

    # interpretability

    def interpret(
        self, checkpoint, image_ids: Sequence[str], run_dir=None, dataset=None, force=False
    ):
        """Attention validation and Grad-CAM panels for some images.

        :raises DatasetError: for an unknown image id, listing the valid ones.
        :returns: The run directory and the table of results.
        """
        preprocess, interpret_cfg = self.section("preprocess"), self.section("interpret")
        manifest = self.load_dataset(dataset)
        unknown = [i for i in image_ids if i not in manifest]
        if unknown:
            raise DatasetError(
                f"Unknown image ids {unknown}. Available ids: {', '.join(manifest.ids)}"
            )
        run_dir = prepare_run_dir(run_dir or self._default_run_dir("interpret"), force)
        device = resolve_device(self.section("train").device)
        model = load_checkpoint(checkpoint).build_model().to(device).eval()
        table = tablib.Dataset(
            headers=["id", "label", "predicted", "attention_iou", "threshold", "dice", "empty_gt"]
        )
        documents = []
        for image_id in image_ids:
            record = manifest[image_id].load()
            shown, mask = resize_sample(*to_tensors(record.image, record.mask), preprocess)
            image = normalize_image(shown, preprocess)
            with torch.no_grad():
                out = model(image[None].to(device))
            attention = attention_validation_pipeline(out, mask.numpy(), cfg=interpret_cfg)
            target = interpret_cfg.target_class if interpret_cfg.target_class >= 0 else None
            cam = grad_cam(model, image, target)
            pred_mask = (out.seg_probs[0, 0] >= 0.5).cpu().numpy()
            gt = mask.numpy().astype(bool)
            dice = dice_score(pred_mask, gt)
            predicted = int(out.class_probs[0].argmax())
            save_panel(
                run_dir / f"panel_{_file_stem(image_id)}.png",
                shown.permute(1, 2, 0).clamp(0, 1).numpy(),
                gt,
                pred_mask,
                attention.upsampled,
                cam.overlay,
                attention_iou=attention.iou,
                dice=dice,
                title=f"{image_id} ({record.label.value})",
            )
            table.append(
                [
                    image_id,
                    record.label.value,
                    predicted,
                    repr(attention.iou),
                    repr(attention.threshold),
                    repr(dice),
                    int(attention.empty_ground_truth),
                ]
            )
            documents.append(
                {
                    "id": image_id,
                    "label": record.label.value,
                    "predicted_class": predicted,
                    "dice": dice,
                    "gradcam_class": cam.target_class,
                    "attention": attention.to_dict(),
                }
            )
        export_table(table, run_dir / FILES["interpret_table"])
        document = {
            "schema_version": 1,
            "images": documents,
            "mean_attention_iou": float(np.mean([d["attention"]["iou"] for d in documents])),
        }
        (run_dir / FILES["interpret"]).write_text(
            json.dumps(document, indent=2, sort_keys=True) + "\n", "utf8"
        )
        run = self._run_manifest("interpret", manifest, checkpoint=str(checkpoint), ids=list(image_ids))
        run.finish()
        run.write(run_dir)
        return run_dir, table

    # reports

    def report(self, run_dirs: Sequence, out_dir=None, force=False, xlsx=False):
        """Consolidate the metrics of several evaluated runs.

        :param xlsx: Also write the table as an Excel worksheet.
        :returns: The output directory and the comparison table.
        """
        table, log = compare_runs(run_dirs)
        self.log.extend(log)
        out_dir = prepare_run_dir(out_dir or self._default_run_dir("report"), force)
        export_table(table, out_dir / FILES["comparison"], "rst")
        export_table(table, out_dir / FILES["comparison_table"])
        if xlsx:
            export_worksheet(
                filename=out_dir / FILES["comparison_xlsx"], ws_name="comparison", rows=table
            )
        run = self._run_manifest("report", runs=[str(r) for r in run_dirs])
        run.finish()
        run.write(out_dir)
        return out_dir, table

    def synth(self, out_dir, counts=(4, 4, 4), external_counts=(2, 4, 4), size=64, seed=0):
        """Write synthetic ``busi`` and ``external`` datasets under ``out_dir``."""
        out_dir = Path(out_dir)
        busi = write_synthetic_busi(out_dir / "busi", counts, size, seed)
        external = write_synthetic_external(out_dir / "external", external_counts, size, seed + 1)
        return busi, external
