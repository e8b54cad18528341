"""
Evaluation: OKS, AP/mAP, invisible-vs-visible breakdown and occlusion statistics
"""
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from tabulate import tabulate

from config import EVAL_CONFIG
from errors import DataError
from poses import BoundingBox, GroundTruthPose, Pose

logger = logging.getLogger(__name__)

MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _coords(pose: Union[Pose, GroundTruthPose, np.ndarray]) -> np.ndarray:
    if isinstance(pose, (Pose, GroundTruthPose)):
        return pose.coords.detach().cpu().double().numpy()[..., :2]
    return np.asarray(pose, dtype=np.float64)[..., :2]


def joint_similarity(pred: np.ndarray, gt: np.ndarray, scale: float, sigmas) -> np.ndarray:
    """Per-joint exp(-d^2 / (2 s^2 k^2)) with s^2 = area and k = 2 sigma"""
    k2 = (2.0 * np.asarray(sigmas, dtype=np.float64)) ** 2
    d2 = np.sum((pred - gt) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * scale * k2 + np.spacing(1)))


def compute_oks(pred, gt: GroundTruthPose, scale: float, sigmas) -> float:
    labeled = gt.labeled.cpu().numpy().astype(bool)
    if not labeled.any():
        raise DataError("OKS needs at least one labeled joint")
    sim = joint_similarity(_coords(pred), _coords(gt), scale, sigmas)
    return float(sim[labeled].mean())


# ---------------------------------------------------------
# AP / mAP
# ---------------------------------------------------------
@dataclass(frozen=True)
class PoseTarget:
    image_id: Union[int, str]
    gt: GroundTruthPose
    box: Optional[BoundingBox] = None
    instance_id: Optional[Union[int, str]] = None

    @property
    def area(self) -> float:
        if self.gt.area is not None:
            return float(self.gt.area)
        if self.box is not None:
            return self.box.area
        return self.gt.labeled_box_area()


@dataclass(frozen=True)
class PosePrediction:
    image_id: Union[int, str]
    pose: Pose
    score: float
    box: Optional[BoundingBox] = None


@dataclass
class APReport:
    map_50_95: float
    ap: Dict[float, float]
    precision: Dict[float, List[float]] = field(default_factory=dict)
    recall: Dict[float, List[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("ap", "precision", "recall"):
            doc[key] = {f"{t:.2f}": v for t, v in doc[key].items()}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _index_targets(targets: Sequence[PoseTarget]) -> Dict:
    by_image = defaultdict(list)
    seen = set()
    for t in targets:
        if t.instance_id is not None:
            key = (t.image_id, t.instance_id)
            if key in seen:
                raise DataError(f"Duplicate ground-truth instance id {key}")
            seen.add(key)
        if not bool(t.gt.labeled.any()):
            logger.warning(f"⚠️ Image {t.image_id}: ignoring target without labeled joints")
            continue
        by_image[t.image_id].append(t)
    return by_image


def _filter_background(predictions, by_image):
    kept = []
    for p in predictions:
        boxes = [t.box for t in by_image.get(p.image_id, []) if t.box is not None]
        if p.box is None or not boxes or any(iou(p.box, b) > 0 for b in boxes):
            kept.append(p)
    if len(kept) < len(predictions):
        logger.info(f"🗑️ Filtered {len(predictions) - len(kept)} background predictions")
    return kept


def greedy_match(oks: np.ndarray, threshold: float) -> np.ndarray:
    """
    oks: (P, G) with predictions already in descending score order.
    Each prediction takes the best unmatched target at or above threshold.
    """
    matched = np.zeros(oks.shape[1], dtype=bool)
    tp = np.zeros(oks.shape[0], dtype=bool)
    for i in range(oks.shape[0]):
        best, best_oks = -1, threshold
        for j in range(oks.shape[1]):
            if not matched[j] and oks[i, j] >= best_oks and (best < 0 or oks[i, j] > oks[i, best]):
                best, best_oks = j, oks[i, j]
        if best >= 0:
            matched[best] = True
            tp[i] = True
    return tp


def average_precision(tp: np.ndarray, num_targets: int):
    """All-point interpolated area under the precision-recall curve"""
    if num_targets == 0 or tp.size == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, tp.size + 1)
    recall = cum_tp / num_targets
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope)), precision, recall


def compute_map(predictions: Sequence[PosePrediction], targets: Sequence[PoseTarget], sigmas,
                thresholds: Optional[Sequence[float]] = None,
                target_filter: Optional[bool] = None) -> APReport:
    thresholds = list(thresholds or EVAL_CONFIG["report_thresholds"])
    if target_filter is None:
        target_filter = EVAL_CONFIG["target_filter"]

    by_image = _index_targets(targets)
    known_images = {t.image_id for t in targets}
    for p in predictions:
        if p.image_id not in known_images:
            raise DataError(f"Prediction refers to unknown image id {p.image_id!r}")

    predictions = list(predictions)
    if target_filter:
        predictions = _filter_background(predictions, by_image)

    num_targets = sum(len(v) for v in by_image.values())
    if num_targets == 0:
        logger.warning("⚠️ No ground-truth instances: AP reported as 0")

    # Global order: descending score, ties by input position
    order = sorted(range(len(predictions)), key=lambda i: (-predictions[i].score, i))
    rank = {idx: r for r, idx in enumerate(order)}

    per_image = defaultdict(list)
    for idx in order:
        per_image[predictions[idx].image_id].append(idx)

    oks_tables = {}
    for image_id, idxs in per_image.items():
        gts = by_image.get(image_id, [])
        table = np.zeros((len(idxs), len(gts)))
        for a, idx in enumerate(idxs):
            for b, t in enumerate(gts):
                table[a, b] = compute_oks(predictions[idx].pose, t.gt, t.area, sigmas)
        oks_tables[image_id] = table

    all_thresholds = sorted(set(MAP_THRESHOLDS) | set(thresholds))
    ap, precision_curves, recall_curves = {}, {}, {}
    for thr in all_thresholds:
        tp = np.zeros(len(predictions), dtype=bool)
        for image_id, idxs in per_image.items():
            flags = greedy_match(oks_tables[image_id], thr)
            for idx, flag in zip(idxs, flags):
                tp[rank[idx]] = flag
        value, precision, recall = average_precision(tp, num_targets)
        ap[thr] = value
        precision_curves[thr] = precision.tolist()
        recall_curves[thr] = recall.tolist()

    map_50_95 = float(np.mean([ap[t] for t in MAP_THRESHOLDS]))
    return APReport(map_50_95, {t: ap[t] for t in thresholds},
                    {t: precision_curves[t] for t in thresholds},
                    {t: recall_curves[t] for t in thresholds})


# ---------------------------------------------------------
# Invisible vs visible joints
# ---------------------------------------------------------
@dataclass
class InvVisReport:
    visible: Dict[float, float]
    invisible: Dict[float, float]
    visible_count: int = 0
    invisible_count: int = 0

    def to_dict(self) -> dict:
        return {
            "visible": {f"{k:.2f}": v for k, v in self.visible.items()},
            "invisible": {f"{k:.2f}": v for k, v in self.invisible.items()},
            "visible_count": self.visible_count,
            "invisible_count": self.invisible_count,
        }


def inv_vis_breakdown(predictions: Sequence, targets: Sequence[PoseTarget], sigmas,
                      levels: Optional[Sequence[float]] = None) -> InvVisReport:
    """
    A joint matches at level t when its own OKS term exp(-d^2/(2 s^2 k^2)) >= t.
    Rates are reported separately for visible and invisible labeled joints.
    """
    levels = list(levels or EVAL_CONFIG["inv_vis_levels"])
    if len(predictions) != len(targets):
        raise DataError(f"{len(predictions)} predictions for {len(targets)} targets")

    hits = {"visible": defaultdict(int), "invisible": defaultdict(int)}
    counts = {"visible": 0, "invisible": 0}
    for pred, target in zip(predictions, targets):
        sim = joint_similarity(_coords(pred), _coords(target.gt), target.area, sigmas)
        visible = target.gt.visible.cpu().numpy().astype(bool)
        invisible = target.gt.invisible.cpu().numpy().astype(bool)
        for name, mask in (("visible", visible), ("invisible", invisible)):
            counts[name] += int(mask.sum())
            for level in levels:
                hits[name][level] += int(np.sum(sim[mask] >= level))

    def rates(name):
        total = counts[name]
        return {level: (hits[name][level] / total if total else 0.0) for level in levels}

    return InvVisReport(rates("visible"), rates("invisible"), counts["visible"], counts["invisible"])


def mean_joint_error(predictions: Sequence[Pose], targets: Sequence[GroundTruthPose]) -> Dict:
    """Mean per-joint L1 error, split into visible and invisible labeled joints"""
    sums = {"visible": 0.0, "invisible": 0.0}
    counts = {"visible": 0, "invisible": 0}
    for pred, gt in zip(predictions, targets):
        if pred.frame != gt.frame:
            raise DataError(f"Frame mismatch: {pred.frame} vs {gt.frame}")
        err = np.abs(_coords(pred) - _coords(gt)).sum(axis=-1)
        for name, mask in (("visible", gt.visible), ("invisible", gt.invisible)):
            mask = mask.cpu().numpy().astype(bool)
            sums[name] += float(err[mask].sum())
            counts[name] += int(mask.sum())
    result = {name: (sums[name] / counts[name] if counts[name] else 0.0) for name in sums}
    result.update({f"{name}_count": counts[name] for name in counts})
    return result


# ---------------------------------------------------------
# Occlusion statistics
# ---------------------------------------------------------
@dataclass
class OcclusionStats:
    total: int
    counts: Dict[float, int]
    average: float
    empty: bool = False

    @property
    def fractions(self) -> Dict[float, float]:
        return {t: (c / self.total if self.total else 0.0) for t, c in self.counts.items()}

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "counts": {f"{t:.2f}": c for t, c in self.counts.items()},
            "fractions": {f"{t:.2f}": f for t, f in self.fractions.items()},
            "average": self.average,
            "empty": self.empty,
        }


def adjacent_pairs(record) -> List[tuple]:
    """Annotated pair groups, else every intra-image pair that overlaps"""
    if record.pair_groups:
        return [tuple(p) for p in record.pair_groups]
    boxes = [inst.box for inst in record.instances]
    return [(i, j) for i in range(len(boxes)) for j in range(i + 1, len(boxes))
            if iou(boxes[i], boxes[j]) > 0]


def occlusion_stats(records, thresholds: Optional[Sequence[float]] = None) -> OcclusionStats:
    thresholds = list(thresholds or EVAL_CONFIG["occlusion_thresholds"])
    overlaps = []
    for record in records:
        for i, j in adjacent_pairs(record):
            overlaps.append(iou(record.instances[i].box, record.instances[j].box))

    if not overlaps:
        logger.warning("⚠️ No instance pairs found: occlusion average reported as 0")
        return OcclusionStats(0, {t: 0 for t in thresholds}, 0.0, empty=True)

    counts = {t: sum(1 for v in overlaps if v > t) for t in thresholds}
    return OcclusionStats(len(overlaps), counts, math.fsum(overlaps) / len(overlaps))


# ---------------------------------------------------------
# Text tables
# ---------------------------------------------------------
def format_occlusion_row(name: str, stats: OcclusionStats) -> str:
    headers = ["Dataset", "Total"] + [f"IoU>{t:g}" for t in stats.counts] + ["Average"]
    row = [name, stats.total]
    for t, c in stats.counts.items():
        row.append(f"{c} ({stats.fractions[t]:.0%})")
    row.append(f"{stats.average:.2f}" + (" (empty)" if stats.empty else ""))
    return tabulate([row], headers=headers, tablefmt="simple")


def format_ap_table(reports: Dict[str, APReport]) -> str:
    thresholds = sorted({t for r in reports.values() for t in r.ap})
    headers = ["Method", "mAP@0.5:0.95"] + [f"AP@{t:.2f}" for t in thresholds]
    rows = [[name, f"{r.map_50_95 * 100:.1f}"] + [f"{r.ap.get(t, 0.0) * 100:.1f}" for t in thresholds]
            for name, r in reports.items()]
    return tabulate(rows, headers=headers, tablefmt="simple")


def format_inv_vis_table(reports: Dict[str, InvVisReport]) -> str:
    levels = sorted({lv for r in reports.values() for lv in r.visible})
    headers = ["Method"] + [f"Inv@{int(lv * 100)}" for lv in levels] + [f"V@{int(lv * 100)}" for lv in levels]
    rows = []
    for name, r in reports.items():
        rows.append([name] + [f"{r.invisible[lv] * 100:.1f}" for lv in levels]
                    + [f"{r.visible[lv] * 100:.1f}" for lv in levels])
    return tabulate(rows, headers=headers, tablefmt="simple")
