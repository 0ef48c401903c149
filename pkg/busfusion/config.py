# -*- coding: utf-8 -*-
"""Classes for creating the necessary configuration parsing the options from the .ini file.

A configuration is a flat INI document. The ``[paths]`` section is
mandatory, every other section mirrors one of the typed configuration
records of the package and is optional::

    [paths]
    root = ./data
    busi_root = %(root)s/busi
    runs = ./runs

    [train]
    epochs = 50
    lr_init = 1e-5

Options are addressed with dotted keys (``train.lr_init``) when they are
overridden from the command line.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from busfusion.dataset import DataConfig
from busfusion.ensemble import EnsembleSpec
from busfusion.exceptions import ConfigError
from busfusion.interpret import InterpretConfig
from busfusion.losses import LossConfig
from busfusion.model import ModelConfig
from busfusion.training import TrainConfig
from busfusion.transforms import AugmentationConfig, PreprocessConfig

__all__ = ["IniParser", "BusfusionConfig", "coerce_value"]


def coerce_value(raw: str, default: Any) -> Any:
    """Convert a raw INI string to the type of ``default``.

    Tuples are written as comma-separated values, booleans accept the
    same spellings as :meth:`configparser.ConfigParser.getboolean`.
    """
    raw = raw.strip()
    if isinstance(default, bool):
        try:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if default and isinstance(default[0], int) and not isinstance(default[0], bool):
            return tuple(int(item) for item in items)
        if default and isinstance(default[0], str):
            return tuple(items)
        return tuple(float(item) for item in items)
    return raw


def _format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class IniParser:
    """Representation for accessing the options of the parsed
    configuration file.
    """

    def __init__(self, options=None):
        self.options = options if options is not None else {}
        self._parser = configparser.ConfigParser()

    def __iter__(self):
        for option in self.options:
            yield option

    def __repr__(self) -> str:
        return f"<Configuration: {self.options}>"

    def sections(self):
        """List all the sections parsed from the INI file.

        :returns: A list of all the sections declared in the INI file.
        :rtype: list
        """
        return [section for section in self.options]

    def has_section(self, section):
        return section in self.options

    def get(self, option):
        """Retrieve a specific option declared in the INI file.

        :param option: Name of the option to retrieve, plain or dotted
                       (``section.option``).

        :returns: The value of the option, ``None`` if it isn't declared.
        :rtype: str
        """
        if "." in option:
            section, key = option.split(".", 1)
            return self.options.get(section, {}).get(key)
        if option in self.options:
            return self.options[option]
        found = [v[option] for v in self.options.values() if option in v]
        return found[0] if found else None

    def import_config(self, ini):
        """Parse the configuration declared in the INI file.

        Parse the INI file using the `configparser` module, then creates a
        dictionary with all the parsed options.

        :param ini: The path of the INI configuration file to parse.
        """
        try:
            read = self._parser.read(ini, encoding="UTF8")
        except configparser.Error as err:
            raise ConfigError(f"Cannot parse {ini}: {err}")
        if not read:
            raise ConfigError(f"Cannot read the configuration file {ini}.")
        self._inipath = Path(ini)
        try:
            self.options = {
                section: dict(self._parser[section])
                for section in self._parser.sections()
            }
        except configparser.InterpolationError as err:
            raise ConfigError(str(err))


class BusfusionConfig(IniParser):
    """Config model for busfusion, checks if the supplied file is
    conformant with the expected sections and keys.

    :param ini: Path of the INI file, ``None`` builds a configuration made
                only of defaults.
    :param overrides: Iterable of ``section.key=value`` strings applied
                      after parsing.
    """

    MANDATORY_SECTIONS = ["paths"]

    PATH_KEYS = [
        "root",
        "busi_root",
        "external_root",
        "manifest",
        "external_manifest",
        "runs",
        "log_file",
    ]

    OPTIONAL_SECTIONS = {
        "data": DataConfig,
        "preprocess": PreprocessConfig,
        "augment": AugmentationConfig,
        "model": ModelConfig,
        "loss": LossConfig,
        "train": TrainConfig,
        "ensemble": EnsembleSpec,
        "interpret": InterpretConfig,
    }

    def __init__(self, ini=None, overrides: Optional[Iterable[str]] = None):
        super().__init__()
        self.log = []
        if ini:
            self.import_config(ini)
        for section in self.MANDATORY_SECTIONS:
            if not self.has_section(section):
                if ini:
                    raise ConfigError(
                        "Must declare all the mandatory sections in the ini file: "
                        + ", ".join(self.MANDATORY_SECTIONS)
                    )
                self.options[section] = {}
        for section in self.sections():
            self._check_keys(section, self.options[section].keys())
        for section in self.OPTIONAL_SECTIONS:
            if not self.has_section(section):
                if ini:
                    self.log.append(
                        f"No [{section}] section specified in the .ini file, using defaults"
                    )
                self.options[section] = {}
        for item in overrides or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"Override {item!r} must be written as key=value.")
            self.set(key.strip(), value.strip())

    def valid_keys(self, section: str) -> list:
        """Return the option names accepted in a section.

        :param section: Name of the section.
        :rtype: list
        """
        if section == "paths":
            return list(self.PATH_KEYS)
        if section not in self.OPTIONAL_SECTIONS:
            raise ConfigError(
                f"Unknown section [{section}]. Valid sections are: "
                + ", ".join(self.MANDATORY_SECTIONS + list(self.OPTIONAL_SECTIONS))
            )
        return [f.name for f in dataclasses.fields(self.OPTIONAL_SECTIONS[section])]

    def _check_keys(self, section: str, keys: Iterable[str]) -> None:
        valid = self.valid_keys(section)
        # configparser exposes the DEFAULT section keys in every section
        defaults = set(self._parser.defaults())
        for key in keys:
            if key not in valid and key not in defaults:
                raise ConfigError(
                    f"Invalid key {section}.{key}. Valid keys are: "
                    + ", ".join(f"{section}.{k}" for k in valid)
                )

    def set(self, dotted: str, value: Any) -> None:
        """Override an option with a dotted key, i.e. ``train.epochs``.

        :param dotted: ``section.key`` name of the option.
        :param value: New value, converted to string.
        """
        section, sep, key = dotted.partition(".")
        if not sep or not key:
            raise ConfigError(
                f"Invalid key {dotted!r}, use the dotted form section.key"
            )
        self._check_keys(section, [key])
        self.options.setdefault(section, {})[key] = _format_value(value)

    def path(self, key: str) -> Optional[Path]:
        """Retrieve a path declared in the ``[paths]`` section.

        :param key: Name of the option.
        :returns: The path or ``None`` if the option isn't declared.
        :rtype: pathlib.Path
        """
        value = self.options["paths"].get(key)
        return Path(value) if value else None

    def require_path(self, key: str) -> Path:
        """Same as :meth:`path` but raise :class:`ConfigError` when missing."""
        value = self.path(key)
        if value is None:
            raise ConfigError(f"Missing paths.{key} in the configuration.")
        return value

    def section_config(self, section: str):
        """Build the typed configuration record of a section.

        Values not declared in the INI file keep the dataclass defaults.

        :param section: Name of an optional section, i.e. ``train``.
        :returns: A dataclass instance.
        """
        cls = self.OPTIONAL_SECTIONS.get(section)
        if cls is None:
            self.valid_keys(section)
        defaults = cls()
        values = {}
        for key, raw in self.options.get(section, {}).items():
            if key not in self.valid_keys(section):
                continue
            try:
                values[key] = coerce_value(raw, getattr(defaults, key))
            except ValueError as err:
                raise ConfigError(f"Invalid value for {section}.{key}: {err}")
        if section == "train":
            self._clamp_patience(values, defaults)
        try:
            return dataclasses.replace(defaults, **values)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"Invalid [{section}] section: {err}")

    def _clamp_patience(self, values: Dict[str, Any], defaults) -> None:
        epochs = values.get("epochs", defaults.epochs)
        patience = values.get("patience", defaults.patience)
        if isinstance(epochs, int) and isinstance(patience, int) and 0 < epochs < patience:
            values["patience"] = epochs
            msg = f"train.patience {patience} exceeds train.epochs {epochs}, using {epochs}"
            if msg not in self.log:
                self.log.append(msg)

    def resolved(self) -> Dict[str, Dict[str, str]]:
        """Return every option, defaults included, as strings.

        :returns: A mapping section -> option -> value.
        :rtype: dict
        """
        resolved = {"paths": dict(sorted(self.options["paths"].items()))}
        for section in self.OPTIONAL_SECTIONS:
            record = self.section_config(section)
            resolved[section] = {
                f.name: _format_value(getattr(record, f.name))
                for f in dataclasses.fields(record)
            }
        return resolved

    def write(self, path) -> None:
        """Write a snapshot of the resolved configuration.

        :param path: Destination of the INI file.
        """
        parser = configparser.ConfigParser(interpolation=None)
        for section, values in self.resolved().items():
            parser[section] = values
        with open(path, mode="w", encoding="UTF8") as f:
            parser.write(f)
