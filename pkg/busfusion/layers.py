# -*- coding: utf-8 -*-
"""Building blocks shared by the encoders and the decoder."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from busfusion.exceptions import ModelConfigError

__all__ = [
    "AttentionGate",
    "ClassificationHead",
    "Decoder",
    "FusionBlock",
    "GatedDecoderBlock",
    "SegmentationHead",
    "UpBlock",
    "conv_bn_relu",
]


def conv_bn_relu(in_channels, out_channels, stride=1, norm=True):
    """3x3 convolution, batch normalization and ReLU."""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=not norm),
        nn.BatchNorm2d(out_channels) if norm else nn.Identity(),
        nn.ReLU(inplace=True),
    )


def _match_size(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class FusionBlock(nn.Module):
    """Fuse the CNN and transformer features of one stage.

    The transformer map is resized bilinearly to the CNN map, concatenated
    after it on the channel axis and mixed by a 3x3 convolution. Either
    branch can be absent (``0`` channels) for the single-branch variants.

    :param cnn_channels: Channels of the CNN feature, ``0`` if unused.
    :param swin_channels: Channels of the transformer feature, ``0`` if unused.
    :param out_channels: Channels of the fused feature.
    :param norm: Use batch normalization after the convolution.
    """

    def __init__(self, cnn_channels: int, swin_channels: int, out_channels: int, norm=True):
        super().__init__()
        if cnn_channels + swin_channels <= 0:
            raise ModelConfigError("A fusion block needs at least one input branch")
        self.cnn_channels = cnn_channels
        self.swin_channels = swin_channels
        self.block = conv_bn_relu(cnn_channels + swin_channels, out_channels, norm=norm)

    def forward(self, f_cnn: Optional[torch.Tensor], f_swin: Optional[torch.Tensor]):
        inputs = []
        reference = f_cnn if f_cnn is not None else f_swin
        if self.swin_channels:
            if f_swin is None:
                raise ModelConfigError("Fusion block expects a transformer feature")
            inputs.append(_match_size(f_swin, reference.shape[-2:]))
        if self.cnn_channels:
            if f_cnn is None:
                raise ModelConfigError("Fusion block expects a CNN feature")
            inputs.append(f_cnn)
        x = torch.cat(inputs, dim=1)
        expected = self.cnn_channels + self.swin_channels
        if x.shape[1] != expected:
            raise ModelConfigError(
                f"Fusion block built for {expected} channels, got {x.shape[1]}"
            )
        return self.block(x)


class AttentionGate(nn.Module):
    """Additive attention gate weighting a skip connection.

    ``alpha = sigmoid(psi(relu(W_g g + W_x x)))``, the gated skip is
    ``x * alpha``. All three projections are 1x1 convolutions.
    """

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: int):
        super().__init__()
        self.W_g = nn.Conv2d(gate_channels, inter_channels, 1)
        self.W_x = nn.Conv2d(skip_channels, inter_channels, 1)
        self.psi = nn.Conv2d(inter_channels, 1, 1)

    def forward(self, x: torch.Tensor, g: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Gate the skip feature ``x`` with the decoder signal ``g``.

        :returns: ``(x * alpha, alpha)``, alpha has a single channel.
        """
        if x.shape[0] != g.shape[0]:
            raise ModelConfigError("Gate and skip batch sizes differ")
        g = _match_size(g, x.shape[-2:])
        alpha = torch.sigmoid(self.psi(F.relu(self.W_g(g) + self.W_x(x))))
        return x * alpha, alpha


class GatedDecoderBlock(nn.Module):
    """Transposed-convolution upsampling, optional skip gating, then two
    convolutions over ``[upsampled, skip]``.

    The upsampled decoder feature is the gating signal ``g``, the gate
    projects it with its own 1x1 ``W_g`` before adding ``W_x x``.
    """

    def __init__(self, in_channels, skip_channels, out_channels, gated=True):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        self.gate = (
            AttentionGate(skip_channels, out_channels, max(skip_channels // 2, 1))
            if gated
            else None
        )
        self.conv = nn.Sequential(
            conv_bn_relu(out_channels + skip_channels, out_channels),
            conv_bn_relu(out_channels, out_channels),
        )

    def forward(self, d, skip):
        up = _match_size(self.up(d), skip.shape[-2:])
        alpha = None
        if self.gate is not None:
            skip, alpha = self.gate(skip, up)
        return self.conv(torch.cat([up, skip], dim=1)), alpha


class UpBlock(nn.Module):
    """Skip-free upsampling by two."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        self.conv = conv_bn_relu(out_channels, out_channels)

    def forward(self, x):
        return self.conv(self.up(x))


class Decoder(nn.Module):
    """Decode the fused pyramid from the stride-32 bottleneck back to the
    input resolution.

    Three gated blocks consume the stride 16, 8 and 4 skips, two plain
    blocks reach stride 1.

    :param fusion_channels: Channels of the four fused stages, finest first.
    :param decoder_channels: Output channels of the five decoder blocks.
    :param gated: Use attention gates on the skips.
    """

    def __init__(self, fusion_channels: Sequence[int], decoder_channels: Sequence[int], gated=True):
        super().__init__()
        if len(fusion_channels) != 4 or len(decoder_channels) != 5:
            raise ModelConfigError("The decoder needs 4 fused stages and 5 widths")
        f1, f2, f3, f4 = fusion_channels
        d = decoder_channels
        self.gated_blocks = nn.ModuleList(
            [
                GatedDecoderBlock(f4, f3, d[0], gated),
                GatedDecoderBlock(d[0], f2, d[1], gated),
                GatedDecoderBlock(d[1], f1, d[2], gated),
            ]
        )
        self.up_blocks = nn.ModuleList([UpBlock(d[2], d[3]), UpBlock(d[3], d[4])])
        self.out_channels = d[4]

    def forward(self, fused: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Run the decoder.

        :param fused: The four fused features, finest first.
        :returns: ``(d1, alphas)`` with the gate maps ordered coarse to fine,
                  empty when the decoder is not gated.
        """
        if len(fused) != 4 or any(f is None for f in fused):
            raise ModelConfigError("The decoder needs all four fused stages")
        x = fused[3]
        alphas = []
        for block, skip in zip(self.gated_blocks, (fused[2], fused[1], fused[0])):
            x, alpha = block(x, skip)
            if alpha is not None:
                alphas.append(alpha)
        for block in self.up_blocks:
            x = block(x)
        return x, alphas


class SegmentationHead(nn.Module):
    """1x1 convolution to one lesion logit per pixel."""

    def __init__(self, in_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, 1)

    def forward(self, x):
        return self.conv(x)


class ClassificationHead(nn.Module):
    """Global average pooling and a two-layer MLP to class logits."""

    def __init__(self, in_channels, num_classes=3, hidden=256):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, num_classes)
        )

    def forward(self, x):
        return self.mlp(x.mean(dim=(2, 3)))
