"""
Cascaded Feature Adaption: F1, F2, F3 -> F1_hat, F2_hat, F3_hat
through one Conv block and two attention-gated Fusion blocks
"""
import logging
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from backbone import FeaturePyramid, check_pyramid, upsample_to
from errors import ShapeError

logger = logging.getLogger(__name__)


class AdaptedPyramid(NamedTuple):
    F1: torch.Tensor
    F2: torch.Tensor
    F3: torch.Tensor


class ConvBlock(nn.Module):
    """3x3 conv + ReLU, spatial size preserved"""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3] != self.channels:
            raise ShapeError(f"Conv block expects {self.channels} channels, got {x.shape[-3]}")
        return F.relu(self.conv(x))


class FusionBlock(nn.Module):
    """
    Upsample the coarser adapted map, project it to the finer map's channels,
    and mix the two with a per-location sigmoid gate w:
        out = ReLU(conv3x3(w * proj(up(coarse)) + (1 - w) * fine))
    """

    def __init__(self, coarse_channels: int, fine_channels: int):
        super().__init__()
        self.coarse_channels = coarse_channels
        self.fine_channels = fine_channels
        self.project = nn.Conv2d(coarse_channels, fine_channels, kernel_size=1)
        self.attention = nn.Conv2d(2 * fine_channels, 1, kernel_size=1)
        self.conv = nn.Conv2d(fine_channels, fine_channels, kernel_size=3, padding=1)

    def gate(self, coarse: torch.Tensor, fine: torch.Tensor):
        if coarse.shape[-3] != self.coarse_channels or fine.shape[-3] != self.fine_channels:
            raise ShapeError(
                f"Fusion block expects ({self.coarse_channels}, {self.fine_channels}) channels, "
                f"got ({coarse.shape[-3]}, {fine.shape[-3]})"
            )
        ch, cw = coarse.shape[-2:]
        fh, fw = fine.shape[-2:]
        if not (ch < fh and cw < fw):
            raise ShapeError(f"Fusion needs a coarser first input, got {(ch, cw)} vs {(fh, fw)}")

        projected = self.project(upsample_to(coarse, (fh, fw)))
        weight = torch.sigmoid(self.attention(torch.cat([projected, fine], dim=-3)))
        return projected, weight

    def forward(self, coarse: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        projected, weight = self.gate(coarse, fine)
        mixed = weight * projected + (1.0 - weight) * fine
        return F.relu(self.conv(mixed))


class CascadedFeatureAdaption(nn.Module):
    def __init__(self, channels: Sequence[int], enabled: bool = True, fusion_enabled: bool = True):
        super().__init__()
        c1, c2, c3 = channels
        self.enabled = enabled
        self.fusion_enabled = fusion_enabled

        if not enabled:
            logger.info("⚠️ CFA disabled: pyramid passes straight through")
            return

        self.conv1 = ConvBlock(c1)
        if fusion_enabled:
            self.fuse2 = FusionBlock(c1, c2)
            self.fuse3 = FusionBlock(c2, c3)
        else:
            self.conv2 = ConvBlock(c2)
            self.conv3 = ConvBlock(c3)

    def forward(self, pyramid: FeaturePyramid) -> AdaptedPyramid:
        check_pyramid(pyramid)
        if not self.enabled:
            return AdaptedPyramid(*pyramid)

        f1_hat = self.conv1(pyramid.F1)
        if self.fusion_enabled:
            f2_hat = self.fuse2(f1_hat, pyramid.F2)
            f3_hat = self.fuse3(f2_hat, pyramid.F3)
        else:
            f2_hat = self.conv2(pyramid.F2)
            f3_hat = self.conv3(pyramid.F3)
        return AdaptedPyramid(f1_hat, f2_hat, f3_hat)


def conv_block(f1: torch.Tensor, block: ConvBlock) -> torch.Tensor:
    return block(f1)


def fusion_block(coarse: torch.Tensor, fine: torch.Tensor, block: FusionBlock) -> torch.Tensor:
    return block(coarse, fine)


def cfa_forward(pyramid: FeaturePyramid, cfa: CascadedFeatureAdaption) -> AdaptedPyramid:
    return cfa(pyramid)
