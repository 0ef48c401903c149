# -*- coding: utf-8 -*-
"""Per-epoch training history, observable by the controller."""
from __future__ import annotations

from contextlib import suppress
from dataclasses import asdict, dataclass
from typing import List, Optional, Protocol

__all__ = ["EpochObserver", "EpochRecord", "TrainingHistory"]


@dataclass
class EpochRecord:
    """One line of the training history."""

    epoch: int
    lr: float
    train_loss: float
    train_dice_loss: float
    train_bce_loss: float
    train_cls_loss: float
    val_dice: Optional[float]
    val_accuracy: Optional[float]
    best: bool = False
    stage: str = "train"

    def to_dict(self) -> dict:
        return asdict(self)


class EpochObserver(Protocol):
    def update(self, history: TrainingHistory, record: EpochRecord) -> None:
        pass


class TrainingHistory:
    """Ordered epoch records. Assigning :attr:`log` appends a record and
    hands it to every attached :class:`EpochObserver`.
    """

    def __init__(self, records: Optional[List[EpochRecord]] = None) -> None:
        self._log: List[EpochRecord] = list(records or [])
        self._observers: List[EpochObserver] = []

    def __len__(self):
        return len(self._log)

    def __iter__(self):
        return iter(self._log)

    def __getitem__(self, index):
        return self._log[index]

    def attach(self, observer: EpochObserver) -> None:
        if observer not in self._observers:
            self._observers.append(observer)

    def detach(self, observer: EpochObserver) -> None:
        with suppress(ValueError):
            self._observers.remove(observer)

    def notify(self, record: EpochRecord) -> None:
        for observer in self._observers:
            observer.update(self, record)

    @property
    def log(self) -> List[EpochRecord]:
        return self._log

    @log.setter
    def log(self, record: EpochRecord) -> None:
        self._log.append(record)
        self.notify(record)

    @property
    def losses(self) -> List[float]:
        return [r.train_loss for r in self._log]

    @property
    def val_dice(self) -> List[float]:
        return [r.val_dice for r in self._log]

    def to_list(self) -> List[dict]:
        return [r.to_dict() for r in self._log]

    @classmethod
    def from_list(cls, records: List[dict]) -> "TrainingHistory":
        return cls([EpochRecord(**r) for r in records])
