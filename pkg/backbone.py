"""
Heatmap Backbone: small encoder-decoder producing the F1/F2/F3 feature pyramid,
the heatmap head, and heatmap -> coordinate conversion (soft and hard argmax)
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import MODEL_CONFIG
from errors import DataError, ShapeError
from poses import PIXEL, BoundingBox, Pose
from skeleton import crop_extent, normalize_pose

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImageCrop:
    pixels: torch.Tensor               # (C, H, W) in [0, 1]
    source_box: BoundingBox
    source_image_id: Union[int, str] = 0

    def __post_init__(self):
        if self.pixels.dim() != 3:
            raise ShapeError(f"Crop pixels must be CxHxW, got {tuple(self.pixels.shape)}")
        if not bool(torch.isfinite(self.pixels).all()):
            raise DataError(f"Crop of image {self.source_image_id} has non-finite pixels")

    @property
    def height(self) -> int:
        return self.pixels.shape[-2]

    @property
    def width(self) -> int:
        return self.pixels.shape[-1]


class FeaturePyramid(NamedTuple):
    """Coarse, middle and fine maps, each (B, C, H, W)"""

    F1: torch.Tensor
    F2: torch.Tensor
    F3: torch.Tensor


def check_pyramid(pyramid: FeaturePyramid):
    sizes = [level.shape[-2:] for level in pyramid]
    for coarse, fine in zip(sizes, sizes[1:]):
        if not (coarse[0] < fine[0] and coarse[1] < fine[1]):
            raise ShapeError(f"Pyramid levels must grow coarse -> fine, got {sizes}")


class ConvUnit(nn.Module):
    """3x3 conv -> BatchNorm -> ReLU"""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.out_channels = out_ch
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.conv(x)))


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


class Backbone(nn.Module):
    """
    Three stride-2 conv stages encode the crop down to F1, one stride-1 unit
    widens F1's receptive field, and two upsample+conv stages decode F2 and F3.
    """

    def __init__(self, cfg: Optional[dict] = None):
        super().__init__()
        cfg = cfg or MODEL_CONFIG
        self.in_channels = cfg["in_channels"]
        self.crop_size = tuple(cfg["crop_size"])
        enc = list(cfg["encoder_channels"])
        dec = list(cfg["decoder_channels"])

        chans = [self.in_channels] + enc
        self.encoder = nn.ModuleList(
            [ConvUnit(chans[i], chans[i + 1], stride=2) for i in range(len(enc))]
        )
        self.context = ConvUnit(enc[-1], enc[-1])
        self.decoder = nn.ModuleList([ConvUnit(enc[-1], dec[0]), ConvUnit(dec[0], dec[1])])

    @property
    def pyramid_channels(self):
        return (self.encoder[-1].out_channels, self.decoder[0].out_channels,
                self.decoder[1].out_channels)

    def forward(self, crops: torch.Tensor) -> FeaturePyramid:
        if crops.dim() == 3:
            crops = crops.unsqueeze(0)
        expected = (self.in_channels,) + self.crop_size
        if tuple(crops.shape[1:]) != expected:
            raise ShapeError(f"Backbone expects crops of {expected}, got {tuple(crops.shape[1:])}")

        x = crops
        for unit in self.encoder:
            x = unit(x)
        f1 = x = self.context(x)

        size = f1.shape[-2:]
        levels = [f1]
        for unit in self.decoder:
            size = (size[0] * 2, size[1] * 2)
            x = unit(upsample_to(x, size))
            levels.append(x)

        return FeaturePyramid(*levels)


class HeatmapHead(nn.Module):
    """Heatmap = Conv(F3_hat); raw scores, no activation"""

    def __init__(self, in_channels: int, num_joints: int, kernel_size: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, num_joints, kernel_size, padding=kernel_size // 2)

    def forward(self, fine: torch.Tensor) -> torch.Tensor:
        if fine.shape[-3] != self.in_channels:
            raise ShapeError(
                f"Heatmap head expects {self.in_channels} channels, got {fine.shape[-3]}"
            )
        return self.conv(fine)


def backbone_forward(crop: Union[ImageCrop, torch.Tensor], backbone: Backbone) -> FeaturePyramid:
    pixels = crop.pixels if isinstance(crop, ImageCrop) else crop
    return backbone(pixels)


def heatmap_head(fine: torch.Tensor, head: HeatmapHead) -> torch.Tensor:
    return head(fine)


# ---------------------------------------------------------
# Heatmap -> coordinates
# ---------------------------------------------------------
def soft_argmax(heatmap: torch.Tensor, beta: float = 1.0) -> Pose:
    """
    Integral regression over a (..., N, H, W) heatmap.
    Coordinates are in heatmap-grid units; confidence is the softmax peak.
    `beta` scales the scores before the softmax (larger = sharper).
    """
    h, w = heatmap.shape[-2:]
    prob = torch.softmax(beta * heatmap.flatten(-2), dim=-1).view_as(heatmap)

    xs = torch.arange(w, dtype=heatmap.dtype, device=heatmap.device)
    ys = torch.arange(h, dtype=heatmap.dtype, device=heatmap.device)
    x = (prob.sum(dim=-2) * xs).sum(dim=-1)
    y = (prob.sum(dim=-1) * ys).sum(dim=-1)
    confidence = prob.flatten(-2).max(dim=-1).values

    return Pose(torch.stack([x, y], dim=-1), confidence, PIXEL)


def hard_argmax(heatmap: torch.Tensor) -> Pose:
    """Grid location of the raw maximum; ties go to the first row-major cell"""
    w = heatmap.shape[-1]
    flat = heatmap.flatten(-2)
    index = torch.argmax(flat, dim=-1)
    x = (index % w).to(heatmap.dtype)
    y = torch.div(index, w, rounding_mode="floor").to(heatmap.dtype)
    confidence = torch.softmax(flat, dim=-1).max(dim=-1).values
    return Pose(torch.stack([x, y], dim=-1), confidence, PIXEL)


def heatmap_to_normalized(pose: Pose, heatmap_size: Sequence[int]) -> Pose:
    """Grid units -> [-1, 1] frame of the crop the heatmap covers"""
    h, w = heatmap_size
    return normalize_pose(pose, crop_extent(w, h))
