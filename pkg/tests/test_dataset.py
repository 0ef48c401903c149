# -*- coding: utf-8 -*-
from pathlib import Path

import numpy as np
import pytest

from busfusion.dataset import (
    AdaptationSplitSpec,
    DatasetManifest,
    ImageRecord,
    Label,
    Source,
    allocate_largest_remainder,
    convert_rgb_mask,
    dataset_fingerprint,
    load_busi_manifest,
    load_external_manifest,
    make_adaptation_splits,
    read_manifest,
    round_half_up,
    save_manifest,
    stratified_split,
)
from busfusion.exceptions import AnnotationAmbiguityError, DatasetError


def path_manifest(counts, source=Source.BUSI):
    """Manifest of file-less records, enough for the split arithmetic."""
    records = [
        ImageRecord(
            id=f"{label.value} ({i})",
            label=label,
            source=source,
            image_path=Path(f"{label.value}_{i}.png"),
        )
        for label, count in zip(Label, counts)
        for i in range(1, count + 1)
    ]
    return DatasetManifest(records=sorted(records, key=lambda r: r.id))


class TestBusiManifest:
    def test_records(self, data_root):
        manifest = load_busi_manifest(data_root / "busi")
        assert len(manifest) == 12
        assert manifest.class_counts == {Label.NORMAL: 4, Label.BENIGN: 4, Label.MALIGNANT: 4}
        assert manifest.ids == sorted(manifest.ids)
        assert all(r.source is Source.BUSI for r in manifest)

    def test_multiple_masks_are_merged(self, data_root):
        manifest = load_busi_manifest(data_root / "busi")
        record = manifest["benign (3)"]
        assert len(record.mask_paths) == 2
        loaded = record.load()
        assert loaded.mask.dtype == np.uint8
        assert set(np.unique(loaded.mask)) <= {0, 1}
        # both halves of the lesion are present
        rows = np.nonzero(loaded.mask.any(axis=1))[0]
        assert rows.size and np.all(np.diff(rows) == 1)

    def test_normal_images_have_empty_masks(self, data_root):
        manifest = load_busi_manifest(data_root / "busi")
        loaded = manifest["normal (1)"].load()
        assert loaded.image.shape == (64, 64, 3)
        assert not loaded.mask.any()

    def test_missing_mask(self, tmp_path, data_root):
        folder = tmp_path / "benign"
        folder.mkdir()
        source = data_root / "busi" / "benign" / "benign (1).png"
        (folder / "benign (1).png").write_bytes(source.read_bytes())
        with pytest.raises(DatasetError, match="Missing mask"):
            load_busi_manifest(tmp_path)

    def test_missing_class_folder_is_logged(self, tmp_path, data_root):
        folder = tmp_path / "normal"
        folder.mkdir()
        source = data_root / "busi" / "normal" / "normal (1).png"
        (folder / "normal (1).png").write_bytes(source.read_bytes())
        manifest = load_busi_manifest(tmp_path)
        assert len(manifest) == 1
        assert any("benign" in msg for msg in manifest.log)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            load_busi_manifest(tmp_path / "nothing")


class TestExternalManifest:
    def test_labels_from_colours(self, data_root):
        manifest = load_external_manifest(data_root / "external")
        assert len(manifest) == 10
        assert manifest.class_counts == {Label.NORMAL: 2, Label.BENIGN: 4, Label.MALIGNANT: 4}
        assert manifest["case_malignant_001"].label is Label.MALIGNANT
        loaded = manifest["case_benign_002"].load()
        assert loaded.mask.any()
        assert set(np.unique(loaded.mask)) <= {0, 1}

    def test_convert_rgb_mask(self):
        rgb = np.zeros((4, 4, 3), dtype=np.uint8)
        rgb[1:3, 1:3, 1] = 255
        binary, label = convert_rgb_mask(rgb)
        assert label is Label.BENIGN
        assert binary.sum() == 4
        rgb[0, 0, 0] = 255
        with pytest.raises(AnnotationAmbiguityError):
            convert_rgb_mask(rgb)

    def test_black_mask_is_normal(self):
        rgb = np.full((4, 4, 3), 5, dtype=np.uint8)
        binary, label = convert_rgb_mask(rgb)
        assert label is None
        assert not binary.any()


class TestSplits:
    def test_busi_split_sizes(self):
        manifest = stratified_split(path_manifest((133, 437, 210)), (0.8, 0.1, 0.1), seed=42)
        assert manifest.split_sizes() == {"train": 624, "val": 78, "test": 78}

    def test_split_is_stratified_and_disjoint(self):
        manifest = stratified_split(path_manifest((133, 437, 210)), seed=3)
        train, val, test = (manifest.subset(s) for s in ("train", "val", "test"))
        assert set(train.ids).isdisjoint(val.ids)
        assert set(train.ids).isdisjoint(test.ids)
        assert set(val.ids).isdisjoint(test.ids)
        assert len(train) + len(val) + len(test) == len(manifest)
        assert train.class_counts[Label.MALIGNANT] == 168

    def test_split_is_seeded(self):
        manifest = path_manifest((20, 30, 25))
        a = stratified_split(manifest, seed=1).split_assignment
        b = stratified_split(manifest, seed=1).split_assignment
        c = stratified_split(manifest, seed=2).split_assignment
        assert a == b
        assert a != c

    def test_too_small_class(self):
        with pytest.raises(DatasetError):
            stratified_split(path_manifest((2, 10, 10)))

    def test_invalid_fractions(self):
        with pytest.raises(ValueError):
            stratified_split(path_manifest((10, 10, 10)), (0.5, 0.3, 0.3))

    def test_adaptation_train_sizes(self):
        manifest = path_manifest((100, 383, 200), Source.EXTERNAL)
        splits = make_adaptation_splits(manifest, AdaptationSplitSpec(), seed=42)
        sizes = [splits.train_size(f) for f in (0.05, 0.10, 0.20, 0.50)]
        assert sizes == [34, 68, 137, 342]

    def test_adaptation_splits_are_nested(self):
        manifest = path_manifest((100, 383, 200), Source.EXTERNAL)
        splits = make_adaptation_splits(manifest, AdaptationSplitSpec(), seed=42)
        fractions = sorted(splits.train_ids)
        for small, large in zip(fractions, fractions[1:]):
            assert set(splits.train_ids[small]) <= set(splits.train_ids[large])
        for f in fractions:
            assert set(splits.train_ids[f]).isdisjoint(splits.test_ids[f])
            assert len(splits.train_ids[f]) + len(splits.test_ids[f]) == len(manifest)

    def test_adaptation_empty_class_is_logged(self):
        manifest = path_manifest((1, 30, 30), Source.EXTERNAL)
        splits = make_adaptation_splits(manifest, AdaptationSplitSpec(fractions=(0.05,)))
        assert splits.train_size(0.05) == 3
        assert any("normal" in msg for msg in splits.log)

    def test_rounding_helpers(self):
        assert round_half_up(341.5) == 342
        assert round_half_up(34.15) == 34
        assert allocate_largest_remainder([106.4, 13.3, 13.3], 133) == [107, 13, 13]
        assert allocate_largest_remainder([1.5, 1.5], 3) == [2, 1]


def test_manifest_file(tmp_path, data_root):
    manifest = stratified_split(load_busi_manifest(data_root / "busi"), seed=42)
    path = tmp_path / "manifest.csv"
    save_manifest(manifest, path)
    reread = read_manifest(path)
    assert reread.ids == manifest.ids
    assert reread.split_assignment == manifest.split_assignment
    assert reread["benign (3)"].mask_paths == manifest["benign (3)"].mask_paths
    assert dataset_fingerprint(reread) == dataset_fingerprint(manifest)


def test_read_manifest_rejects_other_tables(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n", "utf8")
    with pytest.raises(DatasetError):
        read_manifest(path)


def test_fingerprint_tracks_content(synthetic_manifest):
    first = dataset_fingerprint(synthetic_manifest)
    assert first == dataset_fingerprint(synthetic_manifest)
    records = list(synthetic_manifest.records)
    image = records[0].image.copy()
    image[0, 0, 0] = 1.0 - image[0, 0, 0]
    records[0] = ImageRecord(
        id=records[0].id, label=records[0].label, image=image, mask=records[0].mask
    )
    assert dataset_fingerprint(DatasetManifest(records=records)) != first


def test_duplicated_ids():
    record = ImageRecord(id="a", label=Label.NORMAL, image_path=Path("a.png"))
    with pytest.raises(DatasetError):
        DatasetManifest(records=[record, record])


def test_record_validation():
    image = np.zeros((8, 8, 3), dtype=np.float32)
    mask = np.ones((8, 8), dtype=np.uint8)
    with pytest.raises(DatasetError):
        ImageRecord(id="n", label=Label.NORMAL, image=image, mask=mask)
    with pytest.raises(DatasetError):
        ImageRecord(id="b", label=Label.BENIGN, image=image, mask=np.ones((4, 4), np.uint8))
