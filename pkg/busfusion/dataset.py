# -*- coding: utf-8 -*-
"""Dataset manifests: ingestion of BUSI-style and RGB-coded datasets,
stratified splits and the nested adaptation splits.

A manifest only references the files, pixels are read on demand with
:meth:`ImageRecord.load`.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import tablib

from busfusion import import_export as im_ex
from busfusion.exceptions import AnnotationAmbiguityError, DatasetError

__all__ = [
    "AdaptationSplitSpec",
    "DataConfig",
    "DatasetManifest",
    "ImageRecord",
    "Label",
    "SPLITS",
    "Source",
    "allocate_largest_remainder",
    "convert_rgb_mask",
    "dataset_fingerprint",
    "load_busi_manifest",
    "load_external_manifest",
    "make_adaptation_splits",
    "read_manifest",
    "round_half_up",
    "save_manifest",
    "stratified_split",
]

SPLITS = ("train", "val", "test")


class Label(str, enum.Enum):
    """Lesion class, the declaration order is the class index."""

    NORMAL = "normal"
    BENIGN = "benign"
    MALIGNANT = "malignant"

    @property
    def index(self) -> int:
        return list(Label).index(self)

    @classmethod
    def from_index(cls, index: int) -> "Label":
        return list(cls)[index]


class Source(str, enum.Enum):
    BUSI = "busi"
    EXTERNAL = "external"


@dataclass(frozen=True)
class DataConfig:
    """Options of the ``[data]`` section."""

    dataset: str = "busi"
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    split_seed: int = 42
    black_threshold: float = 10 / 255
    adaptation_fractions: Tuple[float, ...] = (0.05, 0.10, 0.20, 0.50)
    adaptation_seed: int = 42
    num_workers: int = 0

    def __post_init__(self):
        if self.dataset not in ("busi", "external"):
            raise ValueError("dataset must be busi or external")
        if not 0 <= self.black_threshold < 1:
            raise ValueError("black_threshold must be in [0, 1)")
        if self.num_workers < 0:
            raise ValueError("num_workers must be >= 0")

    @property
    def fractions(self) -> Tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


@dataclass
class ImageRecord:
    """An image, its merged binary lesion mask and its class label.

    Records built from a directory carry only paths; records built in
    memory (synthetic data, tests) carry the arrays directly.
    """

    id: str
    label: Label
    source: Source = Source.BUSI
    image_path: Optional[Path] = None
    mask_paths: Tuple[Path, ...] = ()
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    black_threshold: float = field(default=10 / 255, repr=False, compare=False)

    def __post_init__(self):
        self.label = Label(self.label)
        self.source = Source(self.source)
        self.mask_paths = tuple(Path(p) for p in self.mask_paths)
        if self.image_path is not None:
            self.image_path = Path(self.image_path)
        if self.image is not None:
            self._check_arrays(self.image, self.mask)

    @property
    def is_loaded(self) -> bool:
        return self.image is not None

    def _check_arrays(self, image, mask):
        if image.ndim != 3 or image.shape[2] != 3 or 0 in image.shape:
            raise DatasetError(f"{self.id}: image must be a non empty H x W x 3 array")
        if mask is None:
            return
        if mask.shape != image.shape[:2]:
            raise DatasetError(
                f"{self.id}: mask shape {mask.shape} differs from image {image.shape[:2]}"
            )
        if not np.isin(mask, (0, 1)).all():
            raise DatasetError(f"{self.id}: mask is not binary")
        if self.label is Label.NORMAL and mask.any():
            raise DatasetError(f"{self.id}: a normal image can't have a lesion mask")

    def _read_mask(self, shape) -> np.ndarray:
        merged = np.zeros(shape, dtype=np.uint8)
        for path in self.mask_paths:
            if self.source is Source.EXTERNAL:
                mask, _ = convert_rgb_mask(
                    im_ex.read_rgb_mask(path), black_threshold=self.black_threshold
                )
            else:
                mask = im_ex.read_binary_mask(path)
            if mask.shape != shape:
                raise DatasetError(
                    f"Mask {path} has shape {mask.shape}, image has {shape}"
                )
            # several annotations of the same image are merged by union
            np.maximum(merged, mask, out=merged)
        return merged

    def load(self) -> "ImageRecord":
        """Return a copy of the record with the pixels in memory.

        :returns: A record whose ``image`` is a float array in ``[0, 1]``
                  and whose ``mask`` is an ``uint8`` array in ``{0, 1}``.
        :rtype: ImageRecord
        """
        if self.is_loaded:
            mask = self.mask
            if mask is None:
                mask = np.zeros(self.image.shape[:2], dtype=np.uint8)
            return dataclasses.replace(self, mask=mask)
        if self.image_path is None:
            raise DatasetError(f"{self.id}: record has neither pixels nor a path")
        image = im_ex.read_image(self.image_path)
        mask = self._read_mask(image.shape[:2])
        return dataclasses.replace(self, image=image, mask=mask)


@dataclass
class DatasetManifest:
    """Ordered records plus their split membership.

    :param records: Records in deterministic order.
    :param split_assignment: Map record id -> ``train``, ``val`` or ``test``.
    :param log: Warnings collected while building the manifest.
    """

    records: List[ImageRecord]
    split_assignment: Dict[str, str] = field(default_factory=dict)
    log: List[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("Duplicated record ids in the manifest")
        self._by_id = {r.id: r for r in self.records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, key):
        return key in self._by_id

    def __getitem__(self, key) -> ImageRecord:
        return self._by_id[key]

    @property
    def ids(self) -> List[str]:
        return [r.id for r in self.records]

    @property
    def class_counts(self) -> Dict[Label, int]:
        """Per-label record count, every label is present."""
        counts = {label: 0 for label in Label}
        for record in self.records:
            counts[record.label] += 1
        return counts

    def split_of(self, record_id: str) -> Optional[str]:
        return self.split_assignment.get(record_id)

    def split_sizes(self) -> Dict[str, int]:
        sizes = {split: 0 for split in SPLITS}
        for split in self.split_assignment.values():
            sizes[split] += 1
        return sizes

    def select(self, ids: Iterable[str]) -> "DatasetManifest":
        """Sub-manifest of the given ids, the manifest order is kept."""
        wanted = set(ids)
        missing = wanted - set(self._by_id)
        if missing:
            raise KeyError(f"Unknown record ids: {sorted(missing)}")
        records = [r for r in self.records if r.id in wanted]
        return DatasetManifest(
            records=records,
            split_assignment={
                r.id: self.split_assignment[r.id]
                for r in records
                if r.id in self.split_assignment
            },
        )

    def subset(self, split: str) -> "DatasetManifest":
        """Sub-manifest of the records assigned to ``split``."""
        if split not in SPLITS:
            raise ValueError(f"Unknown split {split!r}")
        return self.select(
            r.id for r in self.records if self.split_assignment.get(r.id) == split
        )


def _label_from_folder(name: str) -> Optional[Label]:
    try:
        return Label(name.strip().lower())
    except ValueError:
        return None


def _is_image(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in im_ex.IMAGE_SUFFIXES


def load_busi_manifest(root_path, black_threshold: float = 10 / 255) -> DatasetManifest:
    """Build the manifest of a BUSI-style directory.

    The layout is ``<root>/<class>/<name>.png`` plus one or more masks
    ``<name>_mask.png``, ``<name>_mask_1.png``, ... next to the image.

    :param root_path: Directory holding the class folders.
    :returns: A manifest with records ordered by id.
    :rtype: DatasetManifest
    :raises DatasetError: for a lesion image without a mask or an
                          unreadable image.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")
    log = []
    records = []
    folders = {}
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        label = _label_from_folder(folder.name)
        if label is None:
            log.append(f"Skipped folder {folder.name}: not a class name")
            continue
        folders[label] = folder
    for label in Label:
        folder = folders.get(label)
        if folder is None:
            log.append(f"No folder for class {label.value} in {root}")
            continue
        files = sorted(p for p in folder.iterdir() if _is_image(p))
        images = [p for p in files if "_mask" not in p.stem]
        if not images:
            log.append(f"Empty class folder {folder}")
            continue
        for image_path in images:
            pattern = re.compile(re.escape(image_path.stem) + r"_mask(_\d+)?")
            masks = tuple(p for p in files if pattern.fullmatch(p.stem))
            if not masks and label is not Label.NORMAL:
                raise DatasetError(f"Missing mask for {image_path}")
            im_ex.verify_image(image_path)
            records.append(
                ImageRecord(
                    id=image_path.stem,
                    label=label,
                    source=Source.BUSI,
                    image_path=image_path,
                    mask_paths=masks,
                    black_threshold=black_threshold,
                )
            )
    records.sort(key=lambda r: r.id)
    return DatasetManifest(records=records, log=log)


def convert_rgb_mask(rgb_mask, black_threshold: float = 10 / 255):
    """Convert a red/green coded annotation to a binary mask and a label.

    Green pixels denote a benign lesion, red pixels a malignant one.

    :param rgb_mask: ``H x W x 3`` array, ``uint8`` or floats in ``[0, 1]``.
    :param black_threshold: A pixel is foreground when any channel exceeds
                            this intensity.
    :returns: ``(binary_mask, label)`` where label is ``None`` for an
              empty mask.
    :raises AnnotationAmbiguityError: when both colours are present.
    """
    rgb = np.asarray(rgb_mask)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise DatasetError(f"RGB mask must be H x W x 3, got {rgb.shape}")
    rgb = rgb[..., :3].astype(np.float64)
    if np.asarray(rgb_mask).dtype == np.uint8:
        rgb = rgb / 255.0
    foreground = (rgb > black_threshold).any(axis=2)
    binary = foreground.astype(np.uint8)
    if not foreground.any():
        return binary, None
    red, green = rgb[..., 0], rgb[..., 1]
    n_red = int(np.count_nonzero(foreground & (red > green)))
    n_green = int(np.count_nonzero(foreground & (green > red)))
    if n_red and n_green:
        raise AnnotationAmbiguityError(
            f"Mask holds {n_green} benign (green) and {n_red} malignant (red) pixels"
        )
    if not (n_red or n_green):
        raise AnnotationAmbiguityError("Mask foreground is neither red nor green")
    return binary, Label.BENIGN if n_green else Label.MALIGNANT


def load_external_manifest(root_path, black_threshold: float = 10 / 255) -> DatasetManifest:
    """Build the manifest of an external dataset with RGB-coded masks.

    The layout is ``<root>/images/<name>.*`` and ``<root>/masks/<name>.*``.
    The label comes from the colour of the mask, an empty mask means a
    normal image.

    :param root_path: Directory holding ``images`` and ``masks``.
    :rtype: DatasetManifest
    """
    root = Path(root_path)
    images_dir, masks_dir = root / "images", root / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise DatasetError(f"{root} must contain the images/ and masks/ folders")
    masks = {p.stem: p for p in masks_dir.iterdir() if _is_image(p)}
    records = []
    for image_path in sorted(p for p in images_dir.iterdir() if _is_image(p)):
        mask_path = masks.get(image_path.stem)
        if mask_path is None:
            raise DatasetError(f"Missing mask for {image_path}")
        im_ex.verify_image(image_path)
        try:
            _, label = convert_rgb_mask(
                im_ex.read_rgb_mask(mask_path), black_threshold=black_threshold
            )
        except AnnotationAmbiguityError as err:
            raise AnnotationAmbiguityError(f"{mask_path}: {err}")
        records.append(
            ImageRecord(
                id=image_path.stem,
                label=label or Label.NORMAL,
                source=Source.EXTERNAL,
                image_path=image_path,
                mask_paths=(mask_path,),
                black_threshold=black_threshold,
            )
        )
    log = [] if records else [f"No images found in {images_dir}"]
    return DatasetManifest(records=records, log=log)


def allocate_largest_remainder(quotas: Sequence[float], total: int) -> List[int]:
    """Round real quotas to integers summing to ``total``.

    Every quota is floored, the missing units go to the largest fractional
    parts, ties to the lowest index.

    :param quotas: Real-valued quotas whose sum is ``total``.
    :param total: Integer total to reach.
    :rtype: list
    """
    floors = [math.floor(q + 1e-9) for q in quotas]
    remainder = total - sum(floors)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in order[: max(remainder, 0)]:
        floors[i] += 1
    return floors


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5 + 1e-9))


def _ids_by_label(manifest: DatasetManifest) -> Dict[Label, List[str]]:
    ids = {label: [] for label in Label}
    for record in manifest.records:
        ids[record.label].append(record.id)
    return {label: sorted(v) for label, v in ids.items()}


def stratified_split(
    manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 42
) -> DatasetManifest:
    """Assign every record to train, val or test preserving class proportions.

    Per-class counts are rounded with the largest-remainder rule, the
    members of each split are drawn from a seeded permutation.

    :param manifest: Manifest to split.
    :param fractions: ``(train, val, test)`` fractions summing to 1.
    :param seed: Seed of the permutation.
    :returns: A new manifest with ``split_assignment`` populated.
    :rtype: DatasetManifest
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    needed = sum(1 for f in fractions if f > 0)
    rng = np.random.default_rng(seed)
    assignment = {}
    for label, ids in _ids_by_label(manifest).items():
        if not ids:
            continue
        if len(ids) < needed:
            raise DatasetError(
                f"Class {label.value} has {len(ids)} records, {needed} splits need one each"
            )
        counts = allocate_largest_remainder([f * len(ids) for f in fractions], len(ids))
        order = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for split, count in zip(SPLITS, counts):
            for record_id in order[start : start + count]:
                assignment[record_id] = split
            start += count
    return DatasetManifest(
        records=list(manifest.records),
        split_assignment=assignment,
        log=list(manifest.log),
    )


@dataclass
class AdaptationSplitSpec:
    """Fractions of the target dataset used for fine-tuning.

    Once populated by :func:`make_adaptation_splits`, ``train_ids[f]`` and
    ``test_ids[f]`` hold the disjoint id sets of fraction ``f``.
    """

    fractions: Tuple[float, ...] = (0.05, 0.10, 0.20, 0.50)
    train_ids: Dict[float, List[str]] = field(default_factory=dict)
    test_ids: Dict[float, List[str]] = field(default_factory=dict)
    log: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if any(not 0 <= f <= 1 for f in self.fractions):
            raise ValueError("adaptation fractions must be in [0, 1]")

    def train_size(self, fraction: float) -> int:
        return len(self.train_ids[float(fraction)])


def make_adaptation_splits(
    manifest: DatasetManifest, spec: AdaptationSplitSpec, seed: int = 42
) -> AdaptationSplitSpec:
    """Populate nested, stratified train sets for every fraction.

    Fraction ``f`` over ``N`` records selects ``round(f * N)`` training
    images (half rounded up) stratified by class; the remaining records
    are the held-out set of that fraction. Smaller fractions are subsets
    of larger ones.

    :param manifest: Manifest of the target dataset.
    :param spec: Fractions to populate.
    :param seed: Seed of the per-class permutations.
    :rtype: AdaptationSplitSpec
    """
    total = len(manifest)
    by_label = _ids_by_label(manifest)
    rng = np.random.default_rng(seed)
    order = {label: [ids[i] for i in rng.permutation(len(ids))] for label, ids in by_label.items()}
    sizes = {label: len(ids) for label, ids in by_label.items()}
    labels = list(Label)
    previous = {label: 0 for label in labels}
    result = AdaptationSplitSpec(fractions=spec.fractions)
    for fraction in sorted(set(spec.fractions)):
        n_train = round_half_up(fraction * total)
        quotas = [n_train * sizes[label] / total if total else 0.0 for label in labels]
        counts = [
            min(max(math.floor(q + 1e-9), previous[label]), sizes[label])
            for q, label in zip(quotas, labels)
        ]
        remainder = n_train - sum(counts)
        if remainder < 0:
            result.log.append(
                f"Fraction {fraction}: nesting relaxed to keep {n_train} training images"
            )
            counts = allocate_largest_remainder(quotas, n_train)
        else:
            candidates = sorted(
                (i for i in range(len(labels)) if counts[i] < sizes[labels[i]]),
                key=lambda i: (-(quotas[i] - math.floor(quotas[i] + 1e-9)), i),
            )
            for i in candidates[:remainder]:
                counts[i] += 1
        train = []
        for label, count in zip(labels, counts):
            train.extend(order[label][:count])
            if fraction > 0 and sizes[label] and count == 0:
                result.log.append(
                    f"Fraction {fraction}: no training image for class {label.value}"
                )
        previous = dict(zip(labels, counts))
        chosen = set(train)
        result.train_ids[fraction] = [i for i in manifest.ids if i in chosen]
        result.test_ids[fraction] = [i for i in manifest.ids if i not in chosen]
    return result


MANIFEST_HEADERS = ["id", "label", "source", "image_path", "mask_paths", "split"]


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Persist a manifest as a line-delimited CSV table.

    :param manifest: Manifest with file-backed records.
    :param path: Destination file.
    """
    table = tablib.Dataset(headers=MANIFEST_HEADERS)
    for record in manifest.records:
        table.append(
            (
                record.id,
                record.label.value,
                record.source.value,
                "" if record.image_path is None else str(record.image_path),
                ";".join(str(p) for p in record.mask_paths),
                manifest.split_assignment.get(record.id, ""),
            )
        )
    im_ex.export_table(table, path, "csv")


def read_manifest(path, black_threshold: float = 10 / 255) -> DatasetManifest:
    """Read a manifest written by :func:`save_manifest`.

    :param path: CSV manifest file.
    :rtype: DatasetManifest
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"Manifest not found: {path}")
    table = tablib.Dataset().load(path.read_text(encoding="utf8"), format="csv")
    if list(table.headers or []) != MANIFEST_HEADERS:
        raise DatasetError(f"{path} is not a manifest, headers are {table.headers}")
    records, assignment = [], {}
    for row in table.dict:
        records.append(
            ImageRecord(
                id=row["id"],
                label=Label(row["label"]),
                source=Source(row["source"]),
                image_path=row["image_path"] or None,
                mask_paths=tuple(p for p in row["mask_paths"].split(";") if p),
                black_threshold=black_threshold,
            )
        )
        if row["split"]:
            assignment[row["id"]] = row["split"]
    return DatasetManifest(records=records, split_assignment=assignment)


def dataset_fingerprint(manifest: DatasetManifest) -> str:
    """Content hash of a manifest.

    Ids, labels and the bytes of every image and mask (files or in-memory
    arrays) are hashed in record order.

    :rtype: str
    """
    digest = hashlib.sha256()
    for record in manifest.records:
        digest.update(f"{record.id}\0{record.label.value}\0".encode("utf8"))
        if record.image is not None:
            for array in (record.image, record.mask):
                if array is not None:
                    arr = np.ascontiguousarray(array)
                    digest.update(str((arr.dtype.str, arr.shape)).encode("utf8"))
                    digest.update(arr.tobytes())
            continue
        for path in (record.image_path, *record.mask_paths):
            if path is not None:
                digest.update(Path(path).read_bytes())
    return digest.hexdigest()
