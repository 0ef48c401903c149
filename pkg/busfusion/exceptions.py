# -*- coding: utf-8 -*-
"""Exceptions raised by busfusion.

The command line interface maps :class:`ConfigError` to a usage error
(exit code 2) and every other :class:`BusfusionError` to a runtime
failure (exit code 1).
"""

__all__ = [
    "BusfusionError",
    "ConfigError",
    "DatasetError",
    "AnnotationAmbiguityError",
    "ModelConfigError",
    "CheckpointError",
    "TrainingError",
]


class BusfusionError(Exception):
    """Base class for all the errors raised by busfusion."""


class ConfigError(BusfusionError, KeyError):
    """Invalid configuration file, section, key or value."""

    def __str__(self) -> str:
        # KeyError quotes its message, keep it readable.
        return str(self.args[0]) if self.args else ""


class DatasetError(BusfusionError, ValueError):
    """A dataset directory or manifest violates the expected layout."""


class AnnotationAmbiguityError(DatasetError):
    """An RGB-coded mask holds both benign and malignant colours."""


class ModelConfigError(BusfusionError, ValueError):
    """A model or backbone configuration breaks the stage contract."""


class CheckpointError(BusfusionError):
    """A checkpoint file is truncated, corrupted or has another version."""


class TrainingError(BusfusionError):
    """Training diverged or was asked to touch held-out records."""
