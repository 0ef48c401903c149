# -*- coding: utf-8 -*-
import json

import pytest

import busfusion.controller as controller
from busfusion.checkpoint import load_checkpoint
from busfusion.config import BusfusionConfig
from busfusion.exceptions import BusfusionError, ConfigError, DatasetError
from busfusion.reporting import FILES, RunManifest

from .conftest import write_ini


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, data_root):
    root = tmp_path_factory.mktemp("workspace")
    return root, write_ini(root / "toy.ini", data_root, root / "runs")


@pytest.fixture(scope="module")
def ctrl(workspace):
    return controller.new_controller(workspace[1])


@pytest.fixture(scope="module")
def trained(ctrl, workspace):
    run_dir, result = ctrl.train(workspace[0] / "runs" / "train")
    return run_dir, result


class TestController:
    def test_new_controller(self, ctrl, workspace):
        assert ctrl._ini is not None
        assert ctrl._ini.path("runs") == workspace[0] / "runs"
        assert ctrl._default_run_dir("eval") == workspace[0] / "runs" / "eval"

    def test_load_busi_is_split_on_the_fly(self, ctrl):
        manifest = ctrl.load_dataset()
        assert len(manifest) == 12
        assert manifest.split_sizes() == {"train": 6, "val": 3, "test": 3}

    def test_load_external(self, ctrl):
        manifest = ctrl.load_dataset("external")
        assert len(manifest) == 10
        assert not manifest.split_assignment

    def test_unknown_dataset(self, ctrl):
        with pytest.raises(ConfigError):
            ctrl.load_dataset("imagenet")

    def test_missing_dataset_directory(self, missing_dataset_ini):
        ctrl = controller.new_controller(missing_dataset_ini)
        with pytest.raises(ConfigError, match="busi_root"):
            ctrl.load_dataset()

    def test_split_manifest_is_reused(self, workspace, data_root):
        root = workspace[0] / "split_case"
        ctrl = controller.new_controller(write_ini(root.with_suffix(".ini"), data_root, root))
        path = ctrl.split(root / "split")
        assert path.name == FILES["manifest"]
        with pytest.raises(BusfusionError, match="--force"):
            ctrl.split(root / "split")
        fresh = ctrl.load_dataset()
        ctrl._ini.set("paths.manifest", path)
        reused = ctrl.load_dataset()
        assert reused.split_assignment == fresh.split_assignment
        assert reused["benign (3)"].mask_paths == fresh["benign (3)"].mask_paths
        run = RunManifest.read(root / "split")
        assert run.extra["split_sizes"] == {"train": 6, "val": 3, "test": 3}
        assert run.dataset_fingerprint


class TestTrain:
    def test_files(self, trained):
        run_dir, result = trained
        for key in ("run_manifest", "config", "history", "best", "last"):
            assert (run_dir / FILES[key]).exists()
        lines = (run_dir / FILES["history"]).read_text("utf8").splitlines()
        assert len(lines) == len(result.history) == 1
        assert json.loads(lines[0])["epoch"] == 1

    def test_run_manifest(self, trained):
        run = RunManifest.read(trained[0])
        assert run.command == "train"
        assert run.seeds == [7]
        assert run.config["train"]["epochs"] == "1"
        assert run.extra["split_sizes"] == {"train": 6, "val": 3, "test": 3}
        assert run.extra["class_weights_source"] == "train split"
        assert run.extra["parameters"] > 0
        assert run.finished

    def test_config_snapshot_reloads(self, trained):
        snapshot = BusfusionConfig(trained[0] / FILES["config"])
        assert snapshot.section_config("train").seed == 7

    def test_checkpoint(self, trained):
        bundle = load_checkpoint(trained[0] / FILES["best"])
        assert bundle.seed == 7
        assert bundle.model_config["window_size"] == 4

    def test_log_file(self, workspace, tmp_path):
        log_file = tmp_path / "train.log"
        conf = BusfusionConfig(workspace[1], overrides=[f"paths.log_file={log_file}"])
        ctrl = controller.Controller(conf)
        ctrl.train(tmp_path / "run")
        assert "'epoch': 1" in log_file.read_text("utf8")


class TestEvaluate:
    def test_single_checkpoint(self, ctrl, trained, tmp_path):
        run_dir, report = ctrl.evaluate(
            [trained[0] / FILES["best"]], tmp_path / "eval", ci=True
        )
        document = json.loads((run_dir / FILES["metrics"]).read_text("utf8"))
        assert document["n_images"] == 3
        assert set(document["ci"]) == {"dice", "iou"}
        assert len(report.ids) == 3
        assert (run_dir / FILES["per_image"]).exists()

    def test_all_records(self, ctrl, trained, tmp_path):
        _, report = ctrl.evaluate([trained[0] / FILES["best"]], tmp_path / "eval", split="all")
        assert len(report.ids) == 12

    def test_compare_with_itself(self, ctrl, trained, tmp_path):
        best = trained[0] / FILES["best"]
        first, _ = ctrl.evaluate([best], tmp_path / "first")
        second, _ = ctrl.evaluate([best], tmp_path / "second", compare=first)
        document = json.loads((second / FILES["metrics"]).read_text("utf8"))
        assert document["comparison"]["p_value"] == 1.0

    def test_no_checkpoint(self, ctrl):
        with pytest.raises(ConfigError):
            ctrl.evaluate([])


def test_interpret_unknown_id(ctrl, trained, tmp_path):
    with pytest.raises(DatasetError, match="Available ids"):
        ctrl.interpret(trained[0] / FILES["best"], ["benign (99)"], tmp_path / "interpret")


def test_interpret(ctrl, trained, tmp_path):
    run_dir, table = ctrl.interpret(
        trained[0] / FILES["best"], ["benign (1)", "normal (2)"], tmp_path / "interpret"
    )
    assert table["id"] == ["benign (1)", "normal (2)"]
    assert (run_dir / "panel_benign_1.png").exists()
    assert (run_dir / "panel_normal_2.png").exists()
    document = json.loads((run_dir / FILES["interpret"]).read_text("utf8"))
    assert [d["id"] for d in document["images"]] == ["benign (1)", "normal (2)"]
    assert 0 <= document["mean_attention_iou"] <= 1


def test_adapt(ctrl, trained, tmp_path):
    run_dir, points = ctrl.adapt(trained[0] / FILES["best"], tmp_path / "adapt", reference=0.8)
    assert [p.fraction for p in points] == [0.0, 0.2, 0.5]
    assert [p.n_train_images for p in points] == [0, 2, 5]
    for key in ("learning_curve", "learning_curve_json", "learning_curve_plot"):
        assert (run_dir / FILES[key]).exists()
    rows = json.loads((run_dir / FILES["learning_curve_json"]).read_text("utf8"))
    assert rows[0]["recovery"] == round(100 * points[0].dice_mean / 0.8, 2)


def test_report(ctrl, trained, tmp_path):
    best = trained[0] / FILES["best"]
    first, _ = ctrl.evaluate([best], tmp_path / "a")
    second, _ = ctrl.evaluate([best], tmp_path / "b")
    out_dir, table = ctrl.report([first, second, tmp_path / "missing"], tmp_path / "report", xlsx=True)
    assert table["run"] == ["a", "b"]
    assert any("missing" in msg for msg in ctrl.log)
    for key in ("comparison", "comparison_table", "comparison_xlsx"):
        assert (out_dir / FILES[key]).exists()


def test_ensemble(data_root, tmp_path):
    ctrl = controller.new_controller(write_ini(tmp_path / "toy.ini", data_root, tmp_path))
    members = ctrl.train_ensemble(tmp_path / "ensemble")
    assert [m.name for m in members] == ["seed_7", "seed_8"]
    # the shared config keeps its own seed
    assert ctrl._ini.get("train.seed") == "7"
    run_dir, report = ctrl.evaluate([m / FILES["best"] for m in members], tmp_path / "eval")
    assert set(report.seed_stats) >= {"dice", "accuracy", "malignant_recall"}
    document = json.loads((run_dir / FILES["metrics"]).read_text("utf8"))
    assert document["seed_stats"]["dice"][1] >= 0
    assert RunManifest.read(run_dir).seeds == [7, 8]


def test_synth(ctrl, tmp_path):
    busi, external = ctrl.synth(tmp_path / "data", counts=(2, 2, 2), size=32)
    assert len(busi) == 6
    assert len(external) == 10
    assert (tmp_path / "data" / "busi" / "normal" / "normal (1).png").exists()
