# -*- coding: utf-8 -*-
"""The multi-task network.

Two encoder branches (a CNN and a windowed transformer) produce feature
pyramids at strides 4, 8, 16 and 32. Four fusion blocks merge them stage
by stage, the stride-32 fused map is the bottleneck shared by:

* the attention-gated decoder and the segmentation head, giving one
  lesion probability per pixel;
* the classification head, giving Normal / Benign / Malignant
  probabilities.

The ``variant`` field of :class:`ModelConfig` builds the ablated networks
(single branch, CNN-only skips, no attention gates).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from busfusion.backbones import (
    REFERENCE_BACKBONES,
    BackboneSpec,
    FeaturePyramid,
    build_backbone,
)
from busfusion.exceptions import ModelConfigError
from busfusion.layers import (
    ClassificationHead,
    Decoder,
    FusionBlock,
    SegmentationHead,
)

__all__ = [
    "MODEL_VARIANTS",
    "ModelConfig",
    "ModelOutput",
    "MultiTaskNet",
    "build_model",
    "count_parameters",
    "extract_attention_map",
]

MODEL_VARIANTS = (
    "full",
    "cnn_only",
    "transformer_only",
    "no_multiscale_fusion",
    "no_attention_gates",
)


@dataclass(frozen=True)
class ModelConfig:
    """Options of the ``[model]`` section.

    The defaults build the toy network used by the tests: a small strided
    CNN with channels ``cnn_channels`` and a windowed transformer with
    embedding width ``swin_embed_dim`` doubled at every stage.
    """

    cnn_backbone: str = "cnn_toy"
    swin_backbone: str = "swin_toy"
    cnn_channels: Tuple[int, ...] = (16, 32, 64, 128)
    swin_embed_dim: int = 24
    swin_depths: Tuple[int, ...] = (2, 2, 2, 2)
    swin_heads: Tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0
    fusion_channels: Tuple[int, ...] = (16, 32, 64, 128)
    decoder_channels: Tuple[int, ...] = (64, 32, 16, 16, 8)
    num_classes: int = 3
    input_size: int = 224
    cls_hidden: int = 256
    pretrained: bool = False
    variant: str = "full"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ModelConfigError("num_classes must be >= 2")
        if self.input_size <= 0 or self.input_size % 32:
            raise ModelConfigError(
                f"input_size {self.input_size} must be a positive multiple of 32"
            )
        if self.variant not in MODEL_VARIANTS:
            raise ModelConfigError(
                f"Unknown variant {self.variant!r}, valid variants: {', '.join(MODEL_VARIANTS)}"
            )
        if len(self.fusion_channels) != 4 or len(self.decoder_channels) != 5:
            raise ModelConfigError("fusion_channels needs 4 widths, decoder_channels 5")
        widths = (
            self.fusion_channels
            + self.decoder_channels
            + self.cnn_channels
            + (self.swin_embed_dim, self.cls_hidden)
        )
        if any(w <= 0 for w in widths):
            raise ModelConfigError("Channel widths must be positive")
        # validate both backbone contracts early
        self.cnn_spec()
        self.swin_spec()

    @property
    def uses_cnn(self) -> bool:
        return self.variant != "transformer_only"

    @property
    def uses_transformer(self) -> bool:
        return self.variant != "cnn_only"

    @property
    def gated(self) -> bool:
        return self.variant != "no_attention_gates"

    def cnn_spec(self) -> BackboneSpec:
        channels = self.cnn_channels
        if self.cnn_backbone in REFERENCE_BACKBONES:
            channels = REFERENCE_BACKBONES[self.cnn_backbone][2]
        if not self.cnn_backbone.startswith("cnn_"):
            raise ModelConfigError(f"{self.cnn_backbone!r} is not a CNN backbone")
        return BackboneSpec(
            kind=self.cnn_backbone, stage_channels=tuple(channels), pretrained=self.pretrained
        )

    def swin_spec(self) -> BackboneSpec:
        if not self.swin_backbone.startswith("swin_"):
            raise ModelConfigError(f"{self.swin_backbone!r} is not a transformer backbone")
        if self.swin_backbone in REFERENCE_BACKBONES:
            channels = REFERENCE_BACKBONES[self.swin_backbone][2]
        else:
            channels = tuple(self.swin_embed_dim * 2**i for i in range(4))
        return BackboneSpec(
            kind=self.swin_backbone,
            stage_channels=tuple(channels),
            pretrained=self.pretrained,
            depths=tuple(self.swin_depths),
            num_heads=tuple(self.swin_heads),
            window_size=self.window_size,
            mlp_ratio=self.mlp_ratio,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        values = {
            k: tuple(v) if isinstance(v, list) else v for k, v in values.items()
        }
        try:
            return cls(**values)
        except TypeError as err:
            raise ModelConfigError(f"Invalid model configuration: {err}")


@dataclass
class ModelOutput:
    """Everything one forward pass produces.

    :ivar seg_logits: ``N x 1 x H x W`` pre-sigmoid lesion scores.
    :ivar seg_probs: ``N x 1 x H x W`` lesion probabilities.
    :ivar class_logits: ``N x C`` pre-softmax scores.
    :ivar class_probs: ``N x C`` class probabilities.
    :ivar attention_maps: Gate maps ``N x 1 x h x w``, coarse to fine.
    :ivar bottleneck_features: The stride-32 fused features.
    """

    seg_logits: torch.Tensor
    seg_probs: torch.Tensor
    class_logits: torch.Tensor
    class_probs: torch.Tensor
    attention_maps: List[torch.Tensor] = field(default_factory=list)
    bottleneck_features: Optional[torch.Tensor] = None

    def detach(self) -> "ModelOutput":
        return ModelOutput(
            seg_logits=self.seg_logits.detach(),
            seg_probs=self.seg_probs.detach(),
            class_logits=self.class_logits.detach(),
            class_probs=self.class_probs.detach(),
            attention_maps=[a.detach() for a in self.attention_maps],
            bottleneck_features=None
            if self.bottleneck_features is None
            else self.bottleneck_features.detach(),
        )


class MultiTaskNet(nn.Module):
    """Dual-branch encoder, fusion, gated decoder and the two heads.

    :param cfg: The model configuration.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        cnn_spec, swin_spec = cfg.cnn_spec(), cfg.swin_spec()
        self.cnn = build_backbone(cnn_spec, cfg.input_size) if cfg.uses_cnn else None
        self.transformer = (
            build_backbone(swin_spec, cfg.input_size) if cfg.uses_transformer else None
        )
        fusion = []
        for k in range(4):
            c_cnn = cnn_spec.stage_channels[k] if cfg.uses_cnn else 0
            c_swin = swin_spec.stage_channels[k] if cfg.uses_transformer else 0
            if cfg.variant == "no_multiscale_fusion" and k < 3:
                c_swin = 0
            fusion.append(FusionBlock(c_cnn, c_swin, cfg.fusion_channels[k]))
        self.fusion = nn.ModuleList(fusion)
        self.decoder = Decoder(cfg.fusion_channels, cfg.decoder_channels, gated=cfg.gated)
        self.seg_head = SegmentationHead(self.decoder.out_channels)
        self.cls_head = ClassificationHead(cfg.fusion_channels[3], cfg.num_classes, cfg.cls_hidden)

    def cnn_branch_forward(self, image) -> Optional[FeaturePyramid]:
        return self.cnn(image) if self.cnn is not None else None

    def transformer_branch_forward(self, image) -> Optional[FeaturePyramid]:
        return self.transformer(image) if self.transformer is not None else None

    def fuse(self, cnn: Optional[FeaturePyramid], swin: Optional[FeaturePyramid]):
        """Apply the four fusion blocks, finest stage first."""
        return [
            block(
                cnn[k] if cnn is not None else None,
                swin[k] if swin is not None and block.swin_channels else None,
            )
            for k, block in enumerate(self.fusion)
        ]

    def forward(self, image: torch.Tensor) -> ModelOutput:
        """Run the whole network.

        :param image: ``N x 3 x H x W`` normalized images, ``H`` and ``W``
                      multiples of 32.
        :rtype: ModelOutput
        """
        if image.ndim != 4 or image.shape[1] != 3:
            raise ModelConfigError(f"Expected N x 3 x H x W images, got {tuple(image.shape)}")
        if image.shape[-1] % 32 or image.shape[-2] % 32:
            raise ModelConfigError(
                f"Input size {tuple(image.shape[-2:])} is not divisible by 32"
            )
        fused = self.fuse(self.cnn_branch_forward(image), self.transformer_branch_forward(image))
        d1, alphas = self.decoder(fused)
        seg_logits = self.seg_head(d1)
        class_logits = self.cls_head(fused[3])
        return ModelOutput(
            seg_logits=seg_logits,
            seg_probs=torch.sigmoid(seg_logits),
            class_logits=class_logits,
            class_probs=torch.softmax(class_logits, dim=1),
            attention_maps=alphas,
            bottleneck_features=fused[3],
        )


def extract_attention_map(output: ModelOutput, gate_index: int = -1) -> torch.Tensor:
    """Return a gate map captured during the forward pass.

    :param output: Result of a forward pass.
    :param gate_index: Index in the coarse to fine list, the finest gate
                       by default.
    :raises IndexError: if the index is out of range or the model has no
                        attention gates.
    """
    maps = output.attention_maps
    if not -len(maps) <= gate_index < len(maps):
        raise IndexError(f"Gate index {gate_index} out of range for {len(maps)} gates")
    return maps[gate_index]


def count_parameters(model: nn.Module) -> int:
    """Number of trainable parameters."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> MultiTaskNet:
    """Build a network, with weights seeded by ``seed`` when given."""
    if seed is None:
        return MultiTaskNet(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MultiTaskNet(cfg)
