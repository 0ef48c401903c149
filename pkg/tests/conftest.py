# -*- coding: utf-8 -*-
import sys
from pathlib import Path

import pytest

from busfusion.model import ModelConfig, build_model
from busfusion.synthetic import (
    make_synthetic_manifest,
    write_synthetic_busi,
    write_synthetic_external,
)
from busfusion.transforms import PreprocessConfig

sys.dont_write_bytecode = True

TESTS_DIR = Path(__file__).parent

TINY_MODEL = dict(
    cnn_channels=(4, 8, 8, 8),
    swin_embed_dim=8,
    swin_depths=(2, 1, 1, 1),
    swin_heads=(1, 2, 2, 4),
    window_size=4,
    fusion_channels=(4, 8, 8, 8),
    decoder_channels=(8, 8, 4, 4, 4),
    cls_hidden=16,
    input_size=64,
)


@pytest.fixture(scope="module")
def tiny_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0).eval()


@pytest.fixture(scope="module")
def preprocess64():
    return PreprocessConfig(target_size=64)


@pytest.fixture(scope="module")
def synthetic_manifest():
    return make_synthetic_manifest(counts=(4, 4, 4), size=64, seed=0)


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_synthetic_busi(root / "busi", counts=(4, 4, 4), size=64, seed=0)
    write_synthetic_external(root / "external", counts=(2, 4, 4), size=64, seed=1)
    return root


def write_ini(path: Path, root: Path, runs: Path) -> Path:
    paths = "\n".join(
        [
            "[paths]",
            f"root = {root}",
            "busi_root = %(root)s/busi",
            "external_root = %(root)s/external",
            f"runs = {runs}",
            "",
        ]
    )
    path.write_text(paths + "\n" + (TESTS_DIR / "toy_config.ini").read_text("utf8"), "utf8")
    return path


@pytest.fixture
def toy_ini(data_root, tmp_path):
    return write_ini(tmp_path / "toy.ini", data_root, tmp_path / "runs")


@pytest.fixture(scope="module")
def invalid_key_ini():
    return (TESTS_DIR / "invalid_key.ini").resolve()


@pytest.fixture(scope="module")
def no_paths_ini():
    return (TESTS_DIR / "no_paths.ini").resolve()


@pytest.fixture(scope="module")
def missing_dataset_ini():
    return (TESTS_DIR / "missing_dataset.ini").resolve()
