# -*- coding: utf-8 -*-
"""Encoder branches of the network.

Every backbone honours the same stage contract: four feature maps at
strides 4, 8, 16 and 32 of the input, with the channel counts declared in
its :class:`BackboneSpec`. The toy backbones are written here, the
reference ones (EfficientNet-B3, Swin-Base) come from `timm` when the
``reference`` extra is installed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from busfusion.exceptions import ModelConfigError
from busfusion.layers import conv_bn_relu

__all__ = [
    "BACKBONE_KINDS",
    "STAGE_STRIDES",
    "BackboneSpec",
    "FeaturePyramid",
    "ToyCNNBackbone",
    "WindowAttention",
    "WindowBlock",
    "WindowTransformerBackbone",
    "build_backbone",
    "window_partition",
    "window_reverse",
]

STAGE_STRIDES = (4, 8, 16, 32)

BACKBONE_KINDS = ("cnn_reference", "cnn_toy", "swin_reference", "swin_toy")

# timm model name, out_indices and stage channels of the reference backbones
REFERENCE_BACKBONES = {
    "cnn_reference": ("efficientnet_b3", (1, 2, 3, 4), (32, 48, 136, 384)),
    "swin_reference": ("swin_base_patch4_window7_224", (0, 1, 2, 3), (128, 256, 512, 1024)),
}


@dataclass(frozen=True)
class BackboneSpec:
    """Stage contract of one encoder branch."""

    kind: str
    stage_channels: Tuple[int, ...]
    stage_strides: Tuple[int, ...] = STAGE_STRIDES
    pretrained: bool = False
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    num_heads: Tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ModelConfigError(
                f"Unknown backbone {self.kind!r}, valid kinds: {', '.join(BACKBONE_KINDS)}"
            )
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise ModelConfigError("A backbone must declare exactly 4 stages")
        if any(c <= 0 for c in self.stage_channels):
            raise ModelConfigError("Stage channels must be positive")
        strides = self.stage_strides
        if any(s <= 0 or s & (s - 1) for s in strides) or any(
            a >= b for a, b in zip(strides, strides[1:])
        ):
            raise ModelConfigError("Stage strides must be increasing powers of two")
        if self.kind == "swin_toy":
            if len(self.depths) != 4 or len(self.num_heads) != 4:
                raise ModelConfigError("depths and num_heads need 4 entries")
            for channels, heads in zip(self.stage_channels, self.num_heads):
                if heads <= 0 or channels % heads:
                    raise ModelConfigError(
                        f"{heads} heads don't divide {channels} channels"
                    )
            if self.window_size < 1:
                raise ModelConfigError("window_size must be >= 1")


@dataclass
class FeaturePyramid:
    """Per-stage feature maps of one branch, finest first."""

    stages: List[torch.Tensor]
    strides: Tuple[int, ...] = STAGE_STRIDES

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, index):
        return self.stages[index]

    def __iter__(self):
        return iter(self.stages)

    @property
    def shapes(self):
        return [tuple(s.shape[1:]) for s in self.stages]

    def check(self, input_size: Tuple[int, int], channels: Tuple[int, ...]) -> None:
        """Validate the pyramid against the stride and channel contract."""
        height, width = input_size
        for stage, stride, c in zip(self.stages, self.strides, channels):
            expected = (c, math.ceil(height / stride), math.ceil(width / stride))
            if tuple(stage.shape[1:]) != expected:
                raise ModelConfigError(
                    f"Stage at stride {stride} has shape {tuple(stage.shape[1:])}, "
                    f"expected {expected}"
                )


class ToyCNNBackbone(nn.Module):
    """Plain strided-convolution encoder with four stages."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c1, c2, c3, c4 = spec.stage_channels
        self.stem = conv_bn_relu(3, max(c1 // 2, 1), stride=2)
        self.stages = nn.ModuleList(
            [
                nn.Sequential(conv_bn_relu(max(c1 // 2, 1), c1, stride=2), conv_bn_relu(c1, c1)),
                nn.Sequential(conv_bn_relu(c1, c2, stride=2), conv_bn_relu(c2, c2)),
                nn.Sequential(conv_bn_relu(c2, c3, stride=2), conv_bn_relu(c3, c3)),
                nn.Sequential(conv_bn_relu(c3, c4, stride=2), conv_bn_relu(c4, c4)),
            ]
        )

    def forward(self, x):
        x = self.stem(x)
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return FeaturePyramid(outputs, self.spec.stage_strides)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """Split ``B x H x W x C`` into ``(B * nW) x window**2 x C`` windows."""
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    C = windows.shape[-1]
    x = windows.view(-1, H // window, W // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def _relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(
        torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
    ).flatten(1)
    relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    relative = relative + (window - 1)
    return relative[..., 0] * (2 * window - 1) + relative[..., 1]


class WindowAttention(nn.Module):
    """Multi-head self-attention inside local windows with a relative
    position bias.

    Set ``keep_attention`` to retain the softmax weights of the last call
    in ``last_attention``.
    """

    def __init__(self, dim: int, num_heads: int, window: int):
        super().__init__()
        self.num_heads = num_heads
        self.window = window
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads)
        )
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.register_buffer(
            "relative_position_index", _relative_position_index(window), persistent=False
        )
        self.keep_attention = False
        self.last_attention = None

    def forward(self, x, mask: Optional[torch.Tensor] = None):
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1)[None]
        if mask is not None:
            num_windows = mask.shape[0]
            attn = attn.view(-1, num_windows, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(-1, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()
        x = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(x)


class WindowBlock(nn.Module):
    """Transformer block attending within regular or shifted windows.

    Feature maps not divisible by the window are padded, padded tokens are
    masked out of the attention of real tokens. A feature map smaller than
    the window uses a single window and no shift.
    """

    def __init__(self, dim, num_heads, window=7, shifted=False, mlp_ratio=4.0):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._masks: Dict[tuple, Optional[torch.Tensor]] = {}

    def _geometry(self, H, W):
        if min(H, W) < 1:
            raise ModelConfigError("Feature map smaller than one token")
        window = self.window
        shift = window // 2 if self.shifted and min(H, W) > window else 0
        return window, shift

    def _attention_mask(self, H, W, Hp, Wp, window, shift, device, dtype):
        key = (H, W, Hp, Wp, window, shift, device, dtype)
        if key not in self._masks:
            ids = torch.zeros(Hp, Wp, dtype=torch.long)
            if shift:
                count = 0
                spans = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
                for hs in spans:
                    for ws in spans:
                        ids[hs, ws] = count
                        count += 1
            padded = torch.zeros(Hp, Wp, dtype=torch.long)
            padded[H:, :] = 1
            padded[:, W:] = 1
            if shift:
                padded = torch.roll(padded, shifts=(-shift, -shift), dims=(0, 1))
            if not shift and not padded.any():
                self._masks[key] = None
            else:
                ids = (ids * 2 + padded)[None, :, :, None]
                windows = window_partition(ids, window).squeeze(-1)
                mask = (windows[:, :, None] != windows[:, None, :]).to(dtype) * -100.0
                self._masks[key] = mask.to(device)
        return self._masks[key]

    def _attend(self, x):
        B, H, W, C = x.shape
        window, shift = self._geometry(H, W)
        pad_h = (window - H % window) % window
        pad_w = (window - W % window) % window
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
        Hp, Wp = H + pad_h, W + pad_w
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        mask = self._attention_mask(H, W, Hp, Wp, window, shift, x.device, x.dtype)
        windows = self.attn(window_partition(x, window), mask=mask)
        x = window_reverse(windows, window, Hp, Wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        return x[:, :H, :W, :]

    def forward(self, x):
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Halve the resolution by concatenating 2x2 neighbourhoods."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim, bias=False)

    def forward(self, x):
        B, H, W, C = x.shape
        x = F.pad(x, (0, 0, 0, W % 2, 0, H % 2))
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1
        )
        return self.reduction(self.norm(x))


class WindowTransformerBackbone(nn.Module):
    """Hierarchical windowed transformer: stride-4 patch embedding, then
    four stages of alternating regular/shifted window blocks separated by
    patch merging.

    The window of each stage is fixed at construction from ``input_size``,
    smaller inputs are padded to it.
    """

    def __init__(self, spec: BackboneSpec, input_size: int = 224):
        super().__init__()
        self.spec = spec
        dims = spec.stage_channels
        self.patch_embed = nn.Conv2d(3, dims[0], kernel_size=4, stride=4)
        self.embed_norm = nn.LayerNorm(dims[0])
        self.merges = nn.ModuleList(
            [PatchMerging(dims[i - 1], dims[i]) for i in range(1, 4)]
        )
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i, (dim, depth, heads) in enumerate(zip(dims, spec.depths, spec.num_heads)):
            side = max(math.ceil(input_size / spec.stage_strides[i]), 1)
            window = min(spec.window_size, side)
            self.stages.append(
                nn.Sequential(
                    *[
                        WindowBlock(dim, heads, window, shifted=bool(j % 2), mlp_ratio=spec.mlp_ratio)
                        for j in range(depth)
                    ]
                )
            )
            self.norms.append(nn.LayerNorm(dim))

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def forward(self, x):
        x = self.embed_norm(self.patch_embed(x).permute(0, 2, 3, 1))
        outputs = []
        for i, (stage, norm) in enumerate(zip(self.stages, self.norms)):
            if i:
                x = self.merges[i - 1](x)
            x = stage(x)
            outputs.append(norm(x).permute(0, 3, 1, 2).contiguous())
        return FeaturePyramid(outputs, self.spec.stage_strides)


class TimmBackbone(nn.Module):
    """Reference backbone built by `timm` with ``features_only``."""

    def __init__(self, spec: BackboneSpec, input_size: int = 224):
        super().__init__()
        try:
            import timm
        except ImportError:
            raise ModelConfigError(
                f"Backbone {spec.kind} needs timm, install busfusion[reference]"
            )
        self.spec = spec
        name, indices, _ = REFERENCE_BACKBONES[spec.kind]
        kwargs = {"img_size": input_size} if spec.kind == "swin_reference" else {}
        self.body = timm.create_model(
            name, pretrained=spec.pretrained, features_only=True, out_indices=indices, **kwargs
        )
        if tuple(self.body.feature_info.reduction()) != tuple(spec.stage_strides):
            raise ModelConfigError(f"{name} doesn't expose strides {spec.stage_strides}")

    def forward(self, x):
        outputs = []
        for feature, channels in zip(self.body(x), self.spec.stage_channels):
            if feature.shape[1] != channels and feature.shape[-1] == channels:
                # transformer features come out channels-last
                feature = feature.permute(0, 3, 1, 2).contiguous()
            outputs.append(feature)
        return FeaturePyramid(outputs, self.spec.stage_strides)


def build_backbone(spec: BackboneSpec, input_size: int = 224) -> nn.Module:
    """Backbone factory.

    :param spec: Stage contract and kind of the backbone.
    :param input_size: Side of the square input the model is built for.
    :returns: A module whose forward returns a :class:`FeaturePyramid`.
    """
    if spec.kind == "cnn_toy":
        return ToyCNNBackbone(spec)
    if spec.kind == "swin_toy":
        return WindowTransformerBackbone(spec, input_size)
    return TimmBackbone(spec, input_size)
