# -*- coding: utf-8 -*-
"""Utilities for importing images and exporting tables.

The image readers use `Pillow` and always return `numpy` arrays:
:func:`read_image` gives ``H x W x 3`` float intensities in ``[0, 1]``,
:func:`read_binary_mask` gives an ``H x W`` array of ``{0, 1}`` and
:func:`read_rgb_mask` keeps the raw ``uint8`` colours of an RGB-coded mask.

The :func:`export_worksheet` function creates a xlsx file with a worksheet
containing table data, it uses the `openpyxl` package. The
:func:`export_table` function writes a `tablib.Dataset` in one of the text
formats supported by `tablib`.
"""
from pathlib import Path

import numpy as np
from openpyxl import Workbook
from PIL import Image, UnidentifiedImageError

from busfusion.exceptions import DatasetError

__all__ = [
    "IMAGE_SUFFIXES",
    "export_table",
    "export_worksheet",
    "read_binary_mask",
    "read_image",
    "read_rgb_mask",
    "verify_image",
    "write_image",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# masks are stored as 0/255, anything above half intensity is lesion
MASK_LEVEL = 127


def verify_image(path):
    """Check that the file is a readable image without decoding it.

    :param path: Path of the image file.
    :raises DatasetError: if the file can't be opened as an image.
    """
    try:
        with Image.open(path) as img:
            img.verify()
    except (OSError, UnidentifiedImageError, SyntaxError) as err:
        raise DatasetError(f"Unreadable image {path}: {err}")


def _open(path, mode):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode))
    except (OSError, UnidentifiedImageError) as err:
        raise DatasetError(f"Unreadable image {path}: {err}")


def read_image(path):
    """Read an ultrasound image as RGB intensities in ``[0, 1]``.

    :param path: Path of the image file.
    :returns: A ``float32`` array with shape ``H x W x 3``.
    :rtype: numpy.ndarray
    """
    return _open(path, "RGB").astype(np.float32) / 255.0


def read_binary_mask(path):
    """Read a BUSI-style grayscale mask and binarize it.

    :param path: Path of the mask file.
    :returns: An ``uint8`` array with values in ``{0, 1}``.
    :rtype: numpy.ndarray
    """
    return (_open(path, "L") > MASK_LEVEL).astype(np.uint8)


def read_rgb_mask(path):
    """Read an RGB-coded mask keeping its colours.

    :param path: Path of the mask file.
    :returns: An ``uint8`` array with shape ``H x W x 3``.
    :rtype: numpy.ndarray
    """
    return _open(path, "RGB")


def write_image(path, array):
    """Write an array as an 8-bit image.

    Float arrays are expected in ``[0, 1]``, binary masks are written as
    ``0/255``.

    :param path: Destination of the image file.
    :param array: ``H x W`` or ``H x W x 3`` array.
    """
    array = np.asarray(array)
    if array.dtype != np.uint8:
        array = np.clip(np.rint(array * 255.0), 0, 255).astype(np.uint8)
    elif array.max(initial=0) <= 1:
        array = array * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def export_table(dataset, filename, file_format="csv"):
    """Write a tablib.Dataset as a text file.

    :param dataset: The table to export.
    :param filename: Full path of the file to be saved.
    :param file_format: Any text format known to tablib (csv, json, rst, ...).
    """
    content = dataset.export(file_format)
    if not content.endswith("\n"):
        content += "\n"
    Path(filename).write_text(content, encoding="utf8")


def export_worksheet(filename=None, ws_name=None, rows=None):
    """Export data as a xlsx worksheet file.

    :key filename: Full path of the xlsx file to be saved.
    :key ws_name: Name of the worksheet.
    :key rows: tablib.Dataset containing rows data to append to the worksheet.
    """
    wb = Workbook(write_only=True)
    ws = wb.create_sheet(title=ws_name)
    ws.append(rows.headers)
    [ws.append(list(row)) for row in rows]
    wb.save(filename)
