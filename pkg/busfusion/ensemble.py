# -*- coding: utf-8 -*-
"""Seed ensembles.

The members share one :class:`~busfusion.model.ModelConfig` and differ by
the seed they were trained with. Their outputs are averaged, either as
probabilities (default) or as logits passed through the sigmoid/softmax
afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import torch

from busfusion.exceptions import ModelConfigError
from busfusion.model import ModelOutput

__all__ = ["AGGREGATIONS", "Ensemble", "EnsembleOutput", "EnsembleSpec", "ensemble_predict"]

AGGREGATIONS = ("mean_probs", "mean_logits")


@dataclass(frozen=True)
class EnsembleSpec:
    """Options of the ``[ensemble]`` section."""

    seeds: Tuple[int, ...] = (42, 77, 123)
    aggregation: str = "mean_probs"

    def __post_init__(self):
        if len(self.seeds) < 2:
            raise ValueError("An ensemble needs at least 2 seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("Ensemble seeds must be distinct")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {', '.join(AGGREGATIONS)}")


def _mean(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    # mean around the first member: identical members give it back exactly
    first = tensors[0]
    if len(tensors) == 1:
        return first
    offset = torch.stack([t - first for t in tensors[1:]]).sum(dim=0)
    return first + offset / len(tensors)


def _variance(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack(list(tensors)).var(dim=0, unbiased=False)


@dataclass
class EnsembleOutput(ModelOutput):
    """Averaged output with the member outputs and their spread.

    :ivar members: Output of every member, in member order.
    :ivar seg_variance: Per-pixel variance of the member probabilities.
    :ivar class_variance: Per-class variance of the member probabilities.
    :ivar predicted_class: Arg-max of the averaged probabilities.
    """

    members: List[ModelOutput] = field(default_factory=list)
    seg_variance: torch.Tensor = None
    class_variance: torch.Tensor = None
    predicted_class: torch.Tensor = None


def ensemble_predict(members, image: torch.Tensor, aggregation: str = "mean_probs"):
    """Average the predictions of several models.

    :param members: Models in eval mode sharing one configuration.
    :param image: ``N x 3 x H x W`` batch.
    :param aggregation: ``mean_probs`` or ``mean_logits``.
    :raises ModelConfigError: if the members have different configurations.
    :rtype: EnsembleOutput
    """
    if not members:
        raise ModelConfigError("An ensemble needs at least one member")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {', '.join(AGGREGATIONS)}")
    reference = members[0].cfg
    for member in members[1:]:
        if member.cfg != reference:
            raise ModelConfigError("Ensemble members must share the same model configuration")
    outputs = [member(image) for member in members]
    seg_logits = _mean([o.seg_logits for o in outputs])
    class_logits = _mean([o.class_logits for o in outputs])
    if aggregation == "mean_probs":
        seg_probs = _mean([o.seg_probs for o in outputs])
        class_probs = _mean([o.class_probs for o in outputs])
    else:
        seg_probs = torch.sigmoid(seg_logits)
        class_probs = torch.softmax(class_logits, dim=1)
    attention = [
        _mean([o.attention_maps[i] for o in outputs])
        for i in range(len(outputs[0].attention_maps))
    ]
    return EnsembleOutput(
        seg_logits=seg_logits,
        seg_probs=seg_probs,
        class_logits=class_logits,
        class_probs=class_probs,
        attention_maps=attention,
        bottleneck_features=_mean([o.bottleneck_features for o in outputs]),
        members=outputs,
        seg_variance=_variance([o.seg_probs for o in outputs]),
        class_variance=_variance([o.class_probs for o in outputs]),
        predicted_class=class_probs.argmax(dim=1),
    )


class Ensemble:
    """A fixed set of trained members.

    :param members: Models sharing one configuration.
    :param spec: Ensemble options.
    """

    def __init__(self, members, spec: EnsembleSpec = EnsembleSpec()):
        if len(members) < 2:
            raise ModelConfigError("An ensemble needs at least 2 members")
        reference = members[0].cfg
        if any(m.cfg != reference for m in members[1:]):
            raise ModelConfigError("Ensemble members must share the same model configuration")
        self.members = list(members)
        self.spec = spec
        self.cfg = reference

    @classmethod
    def from_checkpoints(cls, bundles, spec: EnsembleSpec = EnsembleSpec()) -> "Ensemble":
        configs = [b.model_config for b in bundles]
        if any(c != configs[0] for c in configs[1:]):
            raise ModelConfigError("Ensemble checkpoints have different model configurations")
        return cls([b.build_model() for b in bundles], spec)

    def __len__(self):
        return len(self.members)

    def to(self, device):
        for member in self.members:
            member.to(device)
        return self

    def eval(self):
        for member in self.members:
            member.eval()
        return self

    def __call__(self, image) -> EnsembleOutput:
        return ensemble_predict(self.members, image, self.spec.aggregation)
