"""
Pose value types shared by the whole pipeline.

Coordinates are torch tensors of shape (..., N, 2) holding (x, y); every pose
carries a frame tag so pixel and normalized coordinates are never mixed.
"""
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from errors import DataError

PIXEL = "pixel"
NORMALIZED = "normalized"
FRAMES = (PIXEL, NORMALIZED)


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DataError(f"Degenerate box {self.as_list()}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(float(x), float(y), float(x + w), float(y + h))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self):
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self):
        return [self.x1, self.y1, self.x2, self.y2]

    def as_xywh(self):
        return [self.x1, self.y1, self.width, self.height]

    def scaled(self, factor: float) -> "BoundingBox":
        """Grow (or shrink) the box about its center"""
        cx, cy = self.center
        hw, hh = self.width * factor / 2.0, self.height * factor / 2.0
        return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)


def _check_frame(frame: str):
    if frame not in FRAMES:
        raise DataError(f"Unknown coordinate frame '{frame}'")


@dataclass(frozen=True)
class Pose:
    """Per-joint (x, y) and confidence in [0, 1]"""

    coords: torch.Tensor
    confidence: torch.Tensor
    frame: str = PIXEL

    def __post_init__(self):
        _check_frame(self.frame)
        if self.coords.shape[-1] != 2 or self.coords.shape[:-1] != self.confidence.shape:
            raise DataError(
                f"Pose shape mismatch: coords {tuple(self.coords.shape)}, "
                f"confidence {tuple(self.confidence.shape)}"
            )

    @classmethod
    def from_array(cls, coords, confidence=None, frame: str = PIXEL) -> "Pose":
        coords = torch.as_tensor(np.asarray(coords, dtype=np.float64))
        if confidence is None:
            confidence = torch.ones(coords.shape[:-1], dtype=coords.dtype)
        else:
            confidence = torch.as_tensor(np.asarray(confidence, dtype=np.float64))
        return cls(coords, confidence, frame)

    @property
    def num_joints(self) -> int:
        return self.coords.shape[-2]

    def with_coords(self, coords: torch.Tensor, frame: Optional[str] = None) -> "Pose":
        return replace(self, coords=coords, frame=frame or self.frame)

    def detach(self) -> "Pose":
        return Pose(self.coords.detach(), self.confidence.detach(), self.frame)

    def select(self, index) -> "Pose":
        """Pick one item out of a batched pose"""
        return Pose(self.coords[index], self.confidence[index], self.frame)

    def numpy(self) -> np.ndarray:
        """(N, 3) array of x, y, confidence"""
        coords = self.coords.detach().cpu().double().numpy()
        conf = self.confidence.detach().cpu().double().numpy()
        return np.concatenate([coords, conf[..., None]], axis=-1)


@dataclass(frozen=True)
class GroundTruthPose:
    """Annotated joints; a visible joint is always labeled"""

    coords: torch.Tensor
    labeled: torch.Tensor
    visible: torch.Tensor
    frame: str = PIXEL
    area: Optional[float] = None

    def __post_init__(self):
        _check_frame(self.frame)
        if self.coords.shape[-1] != 2:
            raise DataError(f"Ground-truth coords must end in 2, got {tuple(self.coords.shape)}")
        if self.labeled.shape != self.coords.shape[:-1] or self.visible.shape != self.labeled.shape:
            raise DataError("Ground-truth masks do not match joint count")
        if bool((self.visible.bool() & ~self.labeled.bool()).any()):
            raise DataError("A visible joint must also be labeled")

    @classmethod
    def from_array(cls, coords, labeled=None, visible=None, frame: str = PIXEL,
                   area: Optional[float] = None) -> "GroundTruthPose":
        coords = torch.as_tensor(np.asarray(coords, dtype=np.float64))
        n_shape = coords.shape[:-1]
        labeled = torch.ones(n_shape, dtype=torch.bool) if labeled is None \
            else torch.as_tensor(np.asarray(labeled, dtype=bool))
        visible = labeled.clone() if visible is None \
            else torch.as_tensor(np.asarray(visible, dtype=bool))
        return cls(coords, labeled, visible, frame, area)

    @property
    def num_joints(self) -> int:
        return self.coords.shape[-2]

    @property
    def invisible(self) -> torch.Tensor:
        return self.labeled.bool() & ~self.visible.bool()

    def with_coords(self, coords: torch.Tensor, frame: Optional[str] = None,
                    area: Optional[float] = None) -> "GroundTruthPose":
        return replace(self, coords=coords, frame=frame or self.frame,
                       area=self.area if area is None else area)

    def select(self, index) -> "GroundTruthPose":
        return GroundTruthPose(self.coords[index], self.labeled[index], self.visible[index],
                               self.frame, self.area)

    def labeled_box_area(self) -> float:
        """Area of the box around labeled joints (fallback object scale)"""
        mask = self.labeled.bool()
        if not bool(mask.any()):
            return 0.0
        pts = self.coords[mask].detach().double()
        span = pts.max(dim=0).values - pts.min(dim=0).values
        return float(span[0] * span[1])

    def object_area(self) -> float:
        return float(self.area) if self.area is not None else self.labeled_box_area()


def stack_poses(poses) -> Pose:
    poses = list(poses)
    frames = {p.frame for p in poses}
    if len(frames) != 1:
        raise DataError(f"Cannot stack poses from frames {sorted(frames)}")
    return Pose(torch.stack([p.coords for p in poses]),
                torch.stack([p.confidence for p in poses]), poses[0].frame)


def stack_ground_truth(gts) -> GroundTruthPose:
    gts = list(gts)
    frames = {g.frame for g in gts}
    if len(frames) != 1:
        raise DataError(f"Cannot stack ground truth from frames {sorted(frames)}")
    return GroundTruthPose(torch.stack([g.coords for g in gts]),
                           torch.stack([g.labeled for g in gts]),
                           torch.stack([g.visible for g in gts]), gts[0].frame)
