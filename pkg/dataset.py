"""
Data Pipeline: annotation JSON I/O, instance cropping and the synthetic
occluded-couple generator

Annotation schema (COCO-keypoints family):
    images:      [{id, file_name, width, height}]
    annotations: [{id, image_id, bbox: [x, y, w, h], keypoints: [x, y, v, ...]}]
    pairs:       [{image_id, instances: [annotation id, annotation id]}]   (optional)
    v: 0 = labeled but invisible, 1 = visible, 2 = unlabeled
"""
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageColor, ImageDraw

from backbone import ImageCrop
from config import DATA_CONFIG, MODEL_CONFIG, SYNTH_CONFIG
from errors import ConfigError, DataError
from evaluation import iou
from poses import BoundingBox, GroundTruthPose
from skeleton import SkeletonSpec, crop_extent, load_skeleton, normalize_pose
from training import InstanceSample

logger = logging.getLogger(__name__)

V_INVISIBLE, V_VISIBLE, V_UNLABELED = 0, 1, 2


@dataclass
class Instance:
    box: BoundingBox
    gt: GroundTruthPose                # source-image pixels
    instance_id: int = 0


@dataclass
class DatasetRecord:
    image_id: int
    width: int
    height: int
    instances: List[Instance] = field(default_factory=list)
    pair_groups: List[Tuple[int, int]] = field(default_factory=list)
    file_name: Optional[str] = None
    pixels: Optional[np.ndarray] = None   # (H, W) or (H, W, 3) uint8

    def validate(self, joint_margin: float = DATA_CONFIG["joint_margin"]):
        for a, b in self.pair_groups:
            if not (0 <= a < len(self.instances) and 0 <= b < len(self.instances)) or a == b:
                raise DataError(f"Record {self.image_id}: invalid pair group ({a}, {b})")

        lo = -joint_margin
        for k, inst in enumerate(self.instances):
            coords = inst.gt.coords[inst.gt.labeled.bool()]
            if coords.numel() == 0:
                continue
            if not bool(torch.isfinite(coords).all()):
                raise DataError(f"Record {self.image_id}: instance {k} has non-finite joints")
            xs, ys = coords[:, 0], coords[:, 1]
            if (xs.min() < lo or ys.min() < lo or xs.max() > self.width - 1 + joint_margin
                    or ys.max() > self.height - 1 + joint_margin):
                raise DataError(f"Record {self.image_id}: instance {k} has joints outside the image")
        return self

    def partner_of(self, index: int) -> Optional[int]:
        for a, b in self.pair_groups:
            if a == index:
                return b
            if b == index:
                return a
        return None

    def image_tensor(self, root: Optional[Union[str, Path]] = None) -> torch.Tensor:
        """(3, H, W) float tensor in [0, 1]"""
        if self.pixels is not None:
            img = Image.fromarray(self.pixels)
        else:
            if self.file_name is None:
                raise DataError(f"Record {self.image_id} has no pixels and no file name")
            path = Path(root or ".") / self.file_name
            try:
                img = Image.open(path)
                img.load()
            except OSError as e:
                raise DataError(f"Record {self.image_id}: cannot read image {path}: {e}") from e
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


# ---------------------------------------------------------
# Annotation JSON
# ---------------------------------------------------------
def _parse_keypoints(values, num_joints: Optional[int], where: str):
    if len(values) % 3 != 0:
        raise DataError(f"{where}: keypoints length {len(values)} is not a multiple of 3")
    triples = np.asarray(values, dtype=np.float64).reshape(-1, 3)
    if num_joints is not None and len(triples) != num_joints:
        raise DataError(f"{where}: expected {num_joints} joints, got {len(triples)}")
    flags = triples[:, 2].astype(int)
    if not np.all(np.isin(flags, (V_INVISIBLE, V_VISIBLE, V_UNLABELED))):
        raise DataError(f"{where}: visibility flags must be 0, 1 or 2")
    return triples[:, :2], flags != V_UNLABELED, flags == V_VISIBLE


def parse_annotations(doc: dict, num_joints: Optional[int] = None,
                      joint_margin: float = DATA_CONFIG["joint_margin"]) -> List[DatasetRecord]:
    try:
        images = doc["images"]
        annotations = doc["annotations"]
    except (KeyError, TypeError) as e:
        raise DataError(f"Annotation document is missing section {e}") from e

    records: Dict[int, DatasetRecord] = {}
    for img in images:
        try:
            record = DatasetRecord(int(img["id"]), int(img["width"]), int(img["height"]),
                                   file_name=img.get("file_name"))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed image entry {img!r}: {e}") from e
        if record.image_id in records:
            raise DataError(f"Duplicate image id {record.image_id}")
        records[record.image_id] = record

    index_of: Dict[int, Tuple[int, int]] = {}
    for ann in annotations:
        where = f"Annotation {ann.get('id')!r} (image {ann.get('image_id')!r})"
        try:
            record = records[int(ann["image_id"])]
            coords, labeled, visible = _parse_keypoints(ann["keypoints"], num_joints, where)
            box = BoundingBox.from_xywh(*ann["bbox"])
            ann_id = int(ann["id"])
        except KeyError as e:
            raise DataError(f"{where}: missing or unknown field {e}") from e
        except (TypeError, ValueError) as e:
            raise DataError(f"{where}: {e}") from e
        if ann_id in index_of:
            raise DataError(f"{where}: duplicate annotation id")

        gt = GroundTruthPose.from_array(coords, labeled, visible, area=ann.get("area"))
        index_of[ann_id] = (record.image_id, len(record.instances))
        record.instances.append(Instance(box, gt, ann_id))

    for pair in doc.get("pairs", []):
        try:
            a, b = (index_of[int(i)] for i in pair["instances"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed pair entry {pair!r}: {e}") from e
        if a[0] != b[0]:
            raise DataError(f"Pair {pair!r} spans two images")
        records[a[0]].pair_groups.append((a[1], b[1]))

    return [r.validate(joint_margin) for r in records.values()]


def load_annotations(path: Union[str, Path], num_joints: Optional[int] = None) -> List[DatasetRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Annotation file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"Annotation file {path} is not valid JSON: {e}") from e
    records = parse_annotations(doc, num_joints)
    logger.info(f"✅ Loaded {len(records)} images, "
                f"{sum(len(r.instances) for r in records)} instances from {path.name}")
    return records


def annotations_to_dict(records: Sequence[DatasetRecord]) -> dict:
    images, annotations, pairs = [], [], []
    for record in records:
        images.append({"id": record.image_id, "file_name": record.file_name,
                       "width": record.width, "height": record.height})
        for inst in record.instances:
            flags = np.where(inst.gt.visible.numpy(), V_VISIBLE,
                             np.where(inst.gt.labeled.numpy(), V_INVISIBLE, V_UNLABELED))
            keypoints = []
            for (x, y), v in zip(inst.gt.coords.double().tolist(), flags.tolist()):
                keypoints.extend([x, y, int(v)])
            entry = {"id": inst.instance_id, "image_id": record.image_id,
                     "bbox": inst.box.as_xywh(), "keypoints": keypoints}
            if inst.gt.area is not None:
                entry["area"] = inst.gt.area
            annotations.append(entry)
        for a, b in record.pair_groups:
            pairs.append({"image_id": record.image_id,
                          "instances": [record.instances[a].instance_id,
                                        record.instances[b].instance_id]})
    return {"images": images, "annotations": annotations, "pairs": pairs}


def save_annotations(records: Sequence[DatasetRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(annotations_to_dict(records), indent=2))
    return path


def load_dataset(path: Union[str, Path], num_joints: Optional[int] = None):
    """
    Accepts an annotation JSON file or a directory holding one.

    Returns:
        (records, image_root)
    """
    path = Path(path)
    if path.is_dir():
        path = path / DATA_CONFIG["annotation_file"]
    return load_annotations(path, num_joints), path.parent


def split_records(records: Sequence[DatasetRecord], holdout: float = DATA_CONFIG["holdout_fraction"],
                  seed: int = 0):
    """Deterministic (train, held_out) split over a seeded permutation of images"""
    if not 0.0 <= holdout < 1.0:
        raise ConfigError(f"holdout fraction must lie in [0, 1), got {holdout}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_hold = int(round(len(records) * holdout))
    held = sorted(order[:n_hold].tolist())
    train = sorted(order[n_hold:].tolist())
    return [records[i] for i in train], [records[i] for i in held]


# ---------------------------------------------------------
# Cropping
# ---------------------------------------------------------
@dataclass(frozen=True)
class CropTransform:
    """Axis-aligned affine map: out = in * scale + offset (per axis)"""

    scale_x: float
    scale_y: float
    offset_x: float
    offset_y: float

    @classmethod
    def for_box(cls, box: BoundingBox, size: Sequence[int]) -> "CropTransform":
        """Maps `box` onto the pixel extent of an (h, w) grid"""
        h, w = size
        target = crop_extent(w, h)
        sx = target.width / box.width
        sy = target.height / box.height
        return cls(sx, sy, target.x1 - box.x1 * sx, target.y1 - box.y1 * sy)

    def _params(self, like: torch.Tensor):
        scale = torch.tensor([self.scale_x, self.scale_y], dtype=like.dtype, device=like.device)
        offset = torch.tensor([self.offset_x, self.offset_y], dtype=like.dtype, device=like.device)
        return scale, offset

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        scale, offset = self._params(points)
        return points * scale + offset

    def invert(self, points: torch.Tensor) -> torch.Tensor:
        scale, offset = self._params(points)
        return (points - offset) / scale

    def inverse(self) -> "CropTransform":
        return CropTransform(1.0 / self.scale_x, 1.0 / self.scale_y,
                             -self.offset_x / self.scale_x, -self.offset_y / self.scale_y)

    def compose(self, then: "CropTransform") -> "CropTransform":
        """self first, then `then`"""
        return CropTransform(self.scale_x * then.scale_x, self.scale_y * then.scale_y,
                             self.offset_x * then.scale_x + then.offset_x,
                             self.offset_y * then.scale_y + then.offset_y)


def crop_instance(image: torch.Tensor, box: BoundingBox, size: Sequence[int] = MODEL_CONFIG["crop_size"],
                  margin: float = DATA_CONFIG["box_margin"], image_id=0) -> Tuple[ImageCrop, CropTransform]:
    """
    Expand `box` by `margin`, resample it to `size` (h, w) with bilinear
    interpolation and zero padding outside the image.
    """
    c, img_h, img_w = image.shape
    extent = crop_extent(img_w, img_h)
    if iou(box, extent) <= 0:
        raise DataError(f"Box {box.as_list()} does not intersect image {image_id}")

    crop_box = box.scaled(1.0 + margin) if margin else box
    transform = CropTransform.for_box(crop_box, size)

    h, w = size
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64),
                            torch.arange(w, dtype=torch.float64), indexing="ij")
    source = transform.invert(torch.stack([xs, ys], dim=-1))
    cx, cy = extent.center
    grid = torch.stack([(source[..., 0] - cx) / (extent.width / 2.0),
                        (source[..., 1] - cy) / (extent.height / 2.0)], dim=-1)

    pixels = F.grid_sample(image.unsqueeze(0), grid.unsqueeze(0).to(image.dtype), mode="bilinear",
                           padding_mode="zeros", align_corners=False)[0]
    return ImageCrop(pixels, crop_box, image_id), transform


def build_instance_samples(records: Sequence[DatasetRecord], root=None,
                           size: Sequence[int] = MODEL_CONFIG["crop_size"],
                           margin: float = DATA_CONFIG["box_margin"]) -> List[InstanceSample]:
    """Crop every instance and express its ground truth in the crop's [-1, 1] frame"""
    h, w = size
    frame = crop_extent(w, h)
    samples = []
    for record in records:
        if not record.instances:
            continue
        image = record.image_tensor(root)
        for k, inst in enumerate(record.instances):
            crop, transform = crop_instance(image, inst.box, size, margin, record.image_id)
            in_crop = inst.gt.with_coords(transform.apply(inst.gt.coords))

            # instance box area measured in the crop's [-1, 1] frame
            normalized_area = (inst.box.width * transform.scale_x * 2.0 / frame.width) * \
                              (inst.box.height * transform.scale_y * 2.0 / frame.height)
            gt = normalize_pose(in_crop, frame)
            gt = gt.with_coords(gt.coords.float(), area=normalized_area)

            samples.append(InstanceSample(
                pixels=crop.pixels, gt=gt, image_id=record.image_id, instance_index=k,
                box=inst.box, transform=transform, partner=record.partner_of(k),
                instance_id=inst.instance_id,
            ))
    return samples


# ---------------------------------------------------------
# Synthetic occluded couples
# ---------------------------------------------------------
@dataclass(frozen=True)
class SynthConfig:
    """
    Synthetic couple settings. `occlusion_rate` targets the fraction of the
    occluded (back) figure's joints that are hidden; front figures are always
    fully visible, so across all labeled joints the invisible fraction is about
    half of it.
    """

    num_images: int = SYNTH_CONFIG["num_images"]
    image_size: Tuple[int, int] = tuple(SYNTH_CONFIG["image_size"])
    limb_length_range: Tuple[float, float] = tuple(SYNTH_CONFIG["limb_length_range"])
    limb_thickness_range: Tuple[int, int] = tuple(SYNTH_CONFIG["limb_thickness_range"])
    limb_jitter_deg: float = SYNTH_CONFIG["limb_jitter_deg"]
    rotation_deg: float = SYNTH_CONFIG["rotation_deg"]
    joint_radius: int = SYNTH_CONFIG["joint_radius"]
    occlusion_rate: float = SYNTH_CONFIG["occlusion_rate"]
    noise_std: float = SYNTH_CONFIG["noise_std"]
    box_padding: float = SYNTH_CONFIG["box_padding"]
    max_retries: int = SYNTH_CONFIG["max_retries"]
    seed: int = SYNTH_CONFIG["seed"]

    def __post_init__(self):
        if self.num_images < 0:
            raise ConfigError("num_images must be non-negative")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigError(f"occlusion_rate must lie in [0, 1], got {self.occlusion_rate}")
        lo, hi = self.limb_length_range
        if not 0 < lo <= hi:
            raise ConfigError(f"Invalid limb length range {self.limb_length_range}")
        t_lo, t_hi = self.limb_thickness_range
        if not 1 <= t_lo <= t_hi:
            raise ConfigError(f"Invalid limb thickness range {self.limb_thickness_range}")
        for name in ("limb_jitter_deg", "rotation_deg"):
            if not 0.0 <= getattr(self, name) <= 180.0:
                raise ConfigError(f"{name} must lie in [0, 180], got {getattr(self, name)}")
        if min(self.image_size) < 4 * hi:
            raise ConfigError(f"Image size {self.image_size} too small for limbs up to {hi}px")

    @classmethod
    def from_dict(cls, overrides: Optional[dict] = None) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        doc = dict(SYNTH_CONFIG)
        for key, value in (overrides or {}).items():
            if key not in known:
                raise ConfigError(f"Unknown synth config key '{key}'")
            doc[key] = value
        for key in ("image_size", "limb_length_range", "limb_thickness_range"):
            doc[key] = tuple(doc[key])
        return cls(**doc)


def _tree_order(skeleton: SkeletonSpec):
    """Breadth-first (parent, child) edges from joint 0 plus the edges closing cycles"""
    neighbours = {i: [] for i in range(skeleton.num_joints)}
    for i, j in skeleton.edges:
        neighbours[i].append(j)
        neighbours[j].append(i)

    seen, order, queue = {0}, [], [0]
    while queue:
        node = queue.pop(0)
        for nxt in sorted(neighbours[node]):
            if nxt not in seen:
                seen.add(nxt)
                order.append((node, nxt))
                queue.append(nxt)
    if len(seen) != skeleton.num_joints:
        raise ConfigError(f"Skeleton '{skeleton.name}' is not connected")
    return order


def limb_lengths(coords: np.ndarray, skeleton: SkeletonSpec) -> np.ndarray:
    return np.array([np.linalg.norm(coords[i] - coords[j]) for i, j in skeleton.edges])


def _sample_figure(rng, skeleton: SkeletonSpec, cfg: SynthConfig, order, max_extent: float) -> np.ndarray:
    """
    Joint layout centred on the origin with every limb length inside the range.
    With a rest pose each limb keeps its rest direction, turned by one whole-figure
    rotation and its own jitter; without one, limb directions are uniform.
    """
    lo, hi = cfg.limb_length_range
    rest = None if skeleton.rest_pose is None else np.asarray(skeleton.rest_pose, dtype=np.float64)
    jitter, turn = np.deg2rad(cfg.limb_jitter_deg), np.deg2rad(cfg.rotation_deg)
    for _ in range(cfg.max_retries):
        coords = np.zeros((skeleton.num_joints, 2))
        rotation = rng.uniform(-turn, turn) if rest is not None else 0.0
        for parent, child in order:
            if rest is None:
                angle = rng.uniform(0.0, 2.0 * np.pi)
            else:
                dx, dy = rest[child] - rest[parent]
                angle = np.arctan2(dy, dx) + rotation + rng.uniform(-jitter, jitter)
            length = rng.uniform(lo, hi)
            coords[child] = coords[parent] + length * np.array([np.cos(angle), np.sin(angle)])
        lengths = limb_lengths(coords, skeleton)
        extent = coords.max(axis=0) - coords.min(axis=0)
        if np.all((lengths >= lo) & (lengths <= hi)) and extent.max() <= max_extent:
            return coords - coords.mean(axis=0)
    raise DataError("Could not sample a figure within the limb length range")


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def covered_joints(back: np.ndarray, front: np.ndarray, skeleton: SkeletonSpec,
                   thickness: float, joint_radius: float) -> np.ndarray:
    """Back-figure joints whose centre lies under a front-figure limb or joint disc"""
    covered = np.zeros(len(back), dtype=bool)
    for i, j in skeleton.edges:
        covered |= _segment_distance(back, front[i], front[j]) <= thickness / 2.0 + 0.5
    dist = np.linalg.norm(back[:, None, :] - front[None, :, :], axis=-1)
    covered |= (dist <= joint_radius + 0.5).any(axis=1)
    return covered


def _placement_range(figure: np.ndarray, size: int, pad: float, axis: int):
    return pad - figure[:, axis].min(), size - 1 - pad - figure[:, axis].max()


def joint_palette(skeleton: SkeletonSpec) -> List[Tuple[int, int, int]]:
    """One hue per joint type; left/right partners share it so a mirrored figure keeps its colours"""
    group = list(range(skeleton.num_joints))
    for left, right in skeleton.flip_pairs:
        group[max(left, right)] = min(left, right)
    types = sorted(set(group))
    return [ImageColor.getrgb(f"hsv({360 * types.index(g) // len(types)},100%,100%)") for g in group]


def _draw_figure(draw: ImageDraw.ImageDraw, coords: np.ndarray, skeleton: SkeletonSpec,
                 thickness: int, radius: int, shade: int, palette, hidden=None):
    """Grey limbs, then a coloured marker on every joint not in `hidden`"""
    for i, j in skeleton.edges:
        draw.line([tuple(coords[i]), tuple(coords[j])], fill=(shade,) * 3, width=thickness)
    for k, (x, y) in enumerate(coords):
        if hidden is not None and hidden[k]:
            continue
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=palette[k])


def _figure_box(coords: np.ndarray, padding: float) -> BoundingBox:
    lo = coords.min(axis=0) - padding
    hi = coords.max(axis=0) + padding
    return BoundingBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def synth_generate(cfg: Optional[SynthConfig] = None, skeleton: Optional[SkeletonSpec] = None) -> List[DatasetRecord]:
    """
    Two stick figures per image: grey limbs with a coloured marker per joint type.
    The second figure is drawn over the first and the first figure's joints it
    covers become labeled-but-invisible. Each image picks, among
    `max_retries` placements of the front figure, the one whose covered-joint count
    keeps the running occlusion fraction of back figures closest to the target.
    """
    cfg = cfg or SynthConfig()
    skeleton = skeleton or load_skeleton()
    order = _tree_order(skeleton)
    palette = joint_palette(skeleton)
    h, w = cfg.image_size
    n = skeleton.num_joints
    pad = cfg.joint_radius + 1.0
    max_extent = min(h, w) - 1 - 2 * pad

    records, occluded_total, joints_total = [], 0, 0
    for image_id in range(cfg.num_images):
        rng = np.random.default_rng(cfg.seed + image_id)
        back = _sample_figure(rng, skeleton, cfg, order, max_extent)
        front = _sample_figure(rng, skeleton, cfg, order, max_extent)
        t_back, t_front = (int(rng.integers(cfg.limb_thickness_range[0], cfg.limb_thickness_range[1] + 1))
                           for _ in range(2))

        (bx_lo, bx_hi), (by_lo, by_hi) = (_placement_range(back, w, pad, 0),
                                          _placement_range(back, h, pad, 1))
        (fx_lo, fx_hi), (fy_lo, fy_hi) = (_placement_range(front, w, pad, 0),
                                          _placement_range(front, h, pad, 1))
        if bx_lo > bx_hi or by_lo > by_hi or fx_lo > fx_hi or fy_lo > fy_hi:
            raise DataError(f"Image {image_id}: figure does not fit a {w}x{h} image")
        back = back + np.array([rng.uniform(bx_lo, bx_hi), rng.uniform(by_lo, by_hi)])

        want = int(round(cfg.occlusion_rate * (joints_total + n))) - occluded_total
        want = min(max(want, 0), n)
        best, best_gap = None, None
        centre = back.mean(axis=0)
        for attempt in range(cfg.max_retries):
            if attempt % 2 == 0:
                # overlapping couple: front figure centred near the back one
                near = centre + rng.normal(0.0, cfg.limb_length_range[1] / 2.0, size=2)
                shift = np.clip(near, [fx_lo, fy_lo], [fx_hi, fy_hi])
            else:
                shift = np.array([rng.uniform(fx_lo, fx_hi), rng.uniform(fy_lo, fy_hi)])
            candidate = front + shift
            covered = covered_joints(back, candidate, skeleton, t_front, cfg.joint_radius)
            gap = abs(int(covered.sum()) - want)
            if best_gap is None or gap < best_gap:
                best, best_gap = (candidate, covered), gap
            if gap == 0:
                break
        front, covered = best

        occluded_total += int(covered.sum())
        joints_total += n

        canvas = Image.new("RGB", (w, h), (0, 0, 0))
        draw = ImageDraw.Draw(canvas)
        shades = rng.integers(120, 256, size=2)
        # a covered joint loses its marker; its limbs still run up to the occluder
        _draw_figure(draw, back, skeleton, t_back, cfg.joint_radius, int(shades[0]), palette, hidden=covered)
        _draw_figure(draw, front, skeleton, t_front, cfg.joint_radius, int(shades[1]), palette)

        pixels = np.asarray(canvas, dtype=np.float64) / 255.0
        pixels = pixels + rng.normal(0.0, cfg.noise_std, size=pixels.shape)
        pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)

        instances = [
            Instance(_figure_box(back, cfg.box_padding),
                     GroundTruthPose.from_array(back, visible=~covered), 2 * image_id + 1),
            Instance(_figure_box(front, cfg.box_padding),
                     GroundTruthPose.from_array(front), 2 * image_id + 2),
        ]
        records.append(DatasetRecord(image_id, w, h, instances, [(0, 1)],
                                     file_name=f"{image_id:06d}.png", pixels=pixels).validate())

    if cfg.num_images:
        measured = occluded_total / joints_total
        if abs(measured - cfg.occlusion_rate) > 0.1:
            raise DataError(f"Occlusion target {cfg.occlusion_rate:.2f} not reachable "
                            f"(measured {measured:.2f} after {cfg.max_retries} placements per image)")
        logger.info(f"✅ Generated {cfg.num_images} images, back-figure occlusion {measured:.1%}")
    return records


def measured_occlusion(records: Sequence[DatasetRecord]) -> float:
    """Fraction of the occluded (first) figures' labeled joints marked invisible"""
    hidden = labeled = 0
    for record in records:
        for a, _ in record.pair_groups:
            gt = record.instances[a].gt
            hidden += int(gt.invisible.sum())
            labeled += int(gt.labeled.sum())
    return hidden / labeled if labeled else 0.0


def write_synthetic_dataset(records: Sequence[DatasetRecord], out_dir: Union[str, Path]) -> Path:
    """PNG per image plus one annotation file"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for record in records:
        if record.pixels is None:
            raise DataError(f"Record {record.image_id} has no pixels to write")
        Image.fromarray(record.pixels).save(out_dir / record.file_name)
    path = save_annotations(records, out_dir / DATA_CONFIG["annotation_file"])
    logger.info(f"💾 Wrote {len(records)} images to {out_dir}")
    return path
