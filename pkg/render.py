"""
Pose overlays: ground truth, initial pose and final pose drawn over the source image.
Invisible ground-truth joints are drawn as hollow markers for every layer.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from config import RENDER_CONFIG
from errors import DataError
from skeleton import SkeletonSpec

logger = logging.getLogger(__name__)

LAYERS = ("ground_truth", "initial", "final")


def legend() -> Dict[str, Tuple[int, int, int]]:
    """Layer name -> RGB colour, in drawing order"""
    return {name: tuple(RENDER_CONFIG["colors"][name]) for name in LAYERS}


def _to_pil(image: Union[torch.Tensor, np.ndarray, Image.Image], scale: int) -> Image.Image:
    if isinstance(image, torch.Tensor):
        arr = image.detach().cpu().clamp(0.0, 1.0).permute(1, 2, 0).numpy()
        image = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
    elif isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB")
    if scale != 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    return image


def to_canvas(coords: np.ndarray, scale: int) -> np.ndarray:
    """Pixel-centre coordinates of the source image -> pixel-centre coordinates of the scaled canvas"""
    return (np.asarray(coords, dtype=np.float64) + 0.5) * scale - 0.5


def draw_pose(draw: ImageDraw.ImageDraw, coords: np.ndarray, skeleton: SkeletonSpec,
              color, radius: int, hollow: Optional[np.ndarray] = None, limbs: bool = True):
    hollow = np.zeros(len(coords), dtype=bool) if hollow is None else np.asarray(hollow, dtype=bool)
    if limbs:
        for i, j in skeleton.edges:
            draw.line([tuple(coords[i]), tuple(coords[j])], fill=color, width=1)
    for (x, y), empty in zip(coords, hollow):
        bbox = [x - radius, y - radius, x + radius, y + radius]
        if empty:
            draw.ellipse(bbox, outline=color, width=1)
        else:
            draw.ellipse(bbox, fill=color)


def render_overlay(image, skeleton: SkeletonSpec, layers: Dict[str, Sequence[np.ndarray]],
                   invisible: Optional[Sequence[np.ndarray]] = None,
                   scale: Optional[int] = None, limbs: bool = True) -> Image.Image:
    """
    Args:
        image: (3, H, W) tensor in [0, 1], an array or a PIL image
        layers: layer name -> list of (N, 2) source-pixel joint arrays, one per person
        invisible: per person, mask of labeled-but-invisible joints (drawn hollow)
    """
    scale = scale or RENDER_CONFIG["scale"]
    radius = RENDER_CONFIG["marker_radius"]
    colors = legend()
    canvas = _to_pil(image, scale)
    draw = ImageDraw.Draw(canvas)

    for name in LAYERS:
        for k, coords in enumerate(layers.get(name, [])):
            hollow = invisible[k] if invisible is not None and k < len(invisible) else None
            draw_pose(draw, to_canvas(coords, scale), skeleton, colors[name], radius, hollow, limbs)
    return canvas


def save_overlay(canvas: Image.Image, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        canvas.save(path)
    except OSError as e:
        raise DataError(f"Cannot write overlay {path}: {e}") from e
    return path


def marker_centers(canvas: Image.Image, color) -> List[Tuple[float, float]]:
    """Centroids of connected pixel blobs of exactly `color` (canvas coordinates)"""
    arr = np.asarray(canvas.convert("RGB"))
    mask = np.all(arr == np.asarray(color, dtype=arr.dtype), axis=-1)
    seen = np.zeros_like(mask)
    centers = []
    for y0, x0 in zip(*np.nonzero(mask)):
        if seen[y0, x0]:
            continue
        stack, pts = [(y0, x0)], []
        seen[y0, x0] = True
        while stack:
            y, x = stack.pop()
            pts.append((x, y))
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ny, nx = y + dy, x + dx
                if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
        xs, ys = zip(*pts)
        centers.append((float(np.mean(xs)), float(np.mean(ys))))
    return centers
