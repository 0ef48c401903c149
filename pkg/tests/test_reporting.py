# -*- coding: utf-8 -*-
import json

import numpy as np
import pytest
import tablib
from openpyxl import load_workbook

from busfusion import import_export as im_ex
from busfusion.exceptions import BusfusionError, DatasetError
from busfusion.figures import save_learning_curve, save_panel
from busfusion.history import EpochRecord, TrainingHistory
from busfusion.metrics import MetricsReport, classification_metrics, confusion_matrix
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


def make_report(dice, preds=None):
    n = len(dice)
    truths = [i % 3 for i in range(n)]
    preds = truths if preds is None else preds
    cm = confusion_matrix(preds, truths)
    return MetricsReport(
        ids=[f"img {i}" for i in range(n)],
        dice=list(dice),
        iou=[d / (2 - d) for d in dice],
        lesion=[t != 0 for t in truths],
        truths=truths,
        preds=list(preds),
        cm=cm,
        classification=classification_metrics(cm),
    )


def write_run(path, dice):
    path.mkdir(parents=True)
    write_metrics(path, make_report(dice))
    return path


class TestRunDir:
    def test_force_is_required_to_reuse(self, tmp_path):
        run_dir = prepare_run_dir(tmp_path / "run")
        RunManifest(command="train", config={}).write(run_dir)
        with pytest.raises(BusfusionError, match="--force"):
            prepare_run_dir(run_dir)
        assert prepare_run_dir(run_dir, force=True) == run_dir

    def test_run_manifest(self, tmp_path):
        manifest = RunManifest(
            command="eval", config={"train": {"seed": "42"}}, seeds=[42], extra={"split": "test"}
        )
        manifest.finish()
        manifest.write(tmp_path)
        reread = RunManifest.read(tmp_path)
        assert reread == manifest
        assert reread.finished

    def test_invalid_run_manifest(self, tmp_path):
        (tmp_path / FILES["run_manifest"]).write_text("{not json", "utf8")
        with pytest.raises(BusfusionError):
            RunManifest.read(tmp_path)


def test_write_metrics(tmp_path):
    report = make_report([0.9, 0.8, 0.7, 0.6])
    report.seed_stats = seed_summary([report, make_report([0.5, 0.5, 0.5, 0.5])])
    paths = write_metrics(tmp_path, report, extra={"split": "test"})
    assert [p.name for p in paths] == [
        "metrics.json",
        "metrics.rst",
        "per_image.csv",
        "classification.csv",
    ]
    document = json.loads(paths[0].read_text("utf8"))
    assert document["split"] == "test"
    assert document["segmentation"]["dice"] == pytest.approx(75.0)
    assert document["seed_stats"]["dice"][0] == pytest.approx(0.625)
    per_image = read_per_image(paths[2])
    assert per_image["img 1"][0] == 0.8


def test_read_per_image_errors(tmp_path):
    path = tmp_path / "per_image.csv"
    path.write_text("name,score\na,1\n", "utf8")
    with pytest.raises(BusfusionError):
        read_per_image(path)
    with pytest.raises(BusfusionError):
        read_per_image(tmp_path / "missing.csv")
    with pytest.raises(BusfusionError, match="no image in common"):
        compare_per_image({"a": (1.0, 1.0)}, {"b": (1.0, 1.0)})


class TestCompareRuns:
    def test_identical_runs_are_not_significant(self, tmp_path):
        dice = [0.9, 0.8, 0.7, 0.85, 0.6]
        a = write_run(tmp_path / "a", dice)
        b = write_run(tmp_path / "b", dice)
        table, log = compare_runs([a, b])
        assert log == []
        assert table["run"] == ["a", "b"]
        assert table["p_value"] == ["", "1"]
        assert table["significance"] == ["", ""]

    def test_consistent_drop_is_flagged(self, tmp_path):
        dice = [0.9 - 0.01 * i for i in range(10)]
        a = write_run(tmp_path / "a", dice)
        b = write_run(tmp_path / "b", [d - 0.1 - 0.001 * i for i, d in enumerate(dice)])
        table, _ = compare_runs([a, b])
        # 2 / 2**10
        assert float(table["p_value"][1]) == pytest.approx(0.001953, abs=1e-6)
        assert table["significance"][1] == "**"

    def test_malformed_directories_are_skipped(self, tmp_path):
        good = write_run(tmp_path / "good", [0.5, 0.6, 0.7])
        empty = tmp_path / "empty"
        empty.mkdir()
        wrong = write_run(tmp_path / "wrong", [0.5, 0.6, 0.7])
        document = json.loads((wrong / FILES["metrics"]).read_text("utf8"))
        document["schema_version"] = 99
        (wrong / FILES["metrics"]).write_text(json.dumps(document), "utf8")
        table, log = compare_runs([empty, good, wrong])
        assert table["run"] == ["good"]
        assert len(log) == 2
        assert any("schema_version" in msg for msg in log)

    def test_nothing_to_compare(self, tmp_path):
        with pytest.raises(BusfusionError):
            compare_runs([tmp_path])


class TestLearningCurve:
    def test_recovery(self):
        point = LearningCurvePoint.from_values(0.5, 342, [0.707], [0.8], reference=0.7617)
        assert point.recovery == pytest.approx(92.8, abs=0.05)
        assert point.dice_std == 0.0

    def test_seed_aggregation(self):
        point = LearningCurvePoint.from_values(0.2, 137, [0.681, 0.821, 0.783], [0.7, 0.8, 0.9])
        assert point.dice_mean == pytest.approx(0.7617, abs=5e-4)
        assert point.dice_std == pytest.approx(0.072, abs=5e-4)
        assert point.recovery is None
        with pytest.raises(ValueError):
            LearningCurvePoint(1.5, 1, 0.5, 0, 0.5, 0)

    def test_table(self, tmp_path):
        points = [
            LearningCurvePoint.from_values(0.0, 0, [0.3], [0.5], reference=0.75),
            LearningCurvePoint.from_values(0.5, 342, [0.7, 0.72], [0.8, 0.82], reference=0.75),
        ]
        table = learning_curve_table(points)
        assert table["fraction"] == [0.0, 0.5]
        assert table["recovery"] == [40.0, 94.67]
        path = save_learning_curve(
            tmp_path / "curve.png",
            [p.fraction for p in points],
            [p.dice_mean for p in points],
            [p.dice_std for p in points],
            reference=0.75,
        )
        assert path.stat().st_size > 0


class TestHistory:
    def record(self, epoch):
        return EpochRecord(
            epoch=epoch,
            lr=1e-3,
            train_loss=1.0 / epoch,
            train_dice_loss=0.5,
            train_bce_loss=0.3,
            train_cls_loss=0.2,
            val_dice=0.5,
            val_accuracy=None,
        )

    def test_observers_are_notified(self):
        seen = []

        class Recorder:
            def update(self, history, record):
                assert history[-1] is record
                seen.append(record.epoch)

        history = TrainingHistory()
        recorder = Recorder()
        history.attach(recorder)
        history.attach(recorder)
        history.log = self.record(1)
        history.log = self.record(2)
        history.detach(recorder)
        history.log = self.record(3)
        assert seen == [1, 2]
        assert len(history) == 3
        assert history.losses == pytest.approx([1.0, 0.5, 1 / 3])

    def test_list_round_trip(self):
        history = TrainingHistory([self.record(1), self.record(2)])
        assert TrainingHistory.from_list(history.to_list()).to_list() == history.to_list()


class TestImportExport:
    def test_images(self, tmp_path):
        gray = np.linspace(0, 1, 16, dtype=np.float32).reshape(4, 4)
        im_ex.write_image(tmp_path / "image.png", gray)
        image = im_ex.read_image(tmp_path / "image.png")
        assert image.shape == (4, 4, 3)
        assert np.allclose(image[..., 0], gray, atol=1 / 255)
        mask = np.eye(4, dtype=np.uint8)
        im_ex.write_image(tmp_path / "mask.png", mask)
        assert np.array_equal(im_ex.read_binary_mask(tmp_path / "mask.png"), mask)

    def test_unreadable_image(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not a png")
        with pytest.raises(DatasetError):
            im_ex.verify_image(path)
        with pytest.raises(DatasetError):
            im_ex.read_image(path)

    def test_tables(self, tmp_path):
        table = tablib.Dataset(headers=["run", "dice"])
        table.append(["a", "80.00"])
        im_ex.export_table(table, tmp_path / "table.rst", "rst")
        assert "80.00" in (tmp_path / "table.rst").read_text("utf8")
        im_ex.export_worksheet(tmp_path / "table.xlsx", "comparison", table)
        sheet = load_workbook(tmp_path / "table.xlsx")["comparison"]
        assert [c.value for c in sheet[1]] == ["run", "dice"]
        assert [c.value for c in sheet[2]] == ["a", "80.00"]


def test_save_panel(tmp_path):
    image = np.zeros((16, 16, 3), dtype=np.float32)
    mask = np.zeros((16, 16), dtype=bool)
    path = save_panel(
        tmp_path / "panel.png", image, mask, mask, np.zeros((16, 16)), np.zeros((16, 16)), 0.5, 0.7
    )
    assert path.exists()
