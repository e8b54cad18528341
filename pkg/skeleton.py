"""
Skeleton Graph: joint topology, adjacency matrices and coordinate frames
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config import SKELETON_CONFIG
from errors import DataError, TopologyError
from poses import NORMALIZED, PIXEL, BoundingBox

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SkeletonSpec:
    name: str
    joint_names: Tuple[str, ...]
    edges: Tuple[Tuple[int, int], ...]
    flip_pairs: Tuple[Tuple[int, int], ...]
    oks_sigmas: Tuple[float, ...]
    # Canonical upright layout (x right, y down) the synthetic generator bends around
    rest_pose: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        n = len(self.joint_names)
        if n == 0:
            raise TopologyError("Skeleton needs at least one joint")

        seen = set()
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise TopologyError(f"Edge ({i}, {j}) out of range for {n} joints")
            if i == j:
                raise TopologyError(f"Self-edge on joint {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise TopologyError(f"Duplicate edge {key}")
            seen.add(key)

        used = set()
        for left, right in self.flip_pairs:
            for idx in (left, right):
                if not 0 <= idx < n:
                    raise TopologyError(f"Flip index {idx} out of range for {n} joints")
                if idx in used:
                    raise TopologyError(f"Joint {idx} appears twice in flip_pairs")
                used.add(idx)

        if len(self.oks_sigmas) != n:
            raise TopologyError(f"Expected {n} OKS sigmas, got {len(self.oks_sigmas)}")
        if any(s <= 0 for s in self.oks_sigmas):
            raise TopologyError("OKS sigmas must be positive")
        if self.rest_pose is not None and len(self.rest_pose) != n:
            raise TopologyError(f"Expected {n} rest-pose joints, got {len(self.rest_pose)}")

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @classmethod
    def from_dict(cls, doc: dict, name: str = "custom") -> "SkeletonSpec":
        try:
            return cls(
                name=doc.get("name", name),
                joint_names=tuple(doc["joint_names"]),
                edges=tuple((int(a), int(b)) for a, b in doc["edges"]),
                flip_pairs=tuple((int(a), int(b)) for a, b in doc.get("flip_pairs", [])),
                oks_sigmas=tuple(float(s) for s in doc["oks_sigmas"]),
                rest_pose=(tuple((float(x), float(y)) for x, y in doc["rest_pose"])
                           if doc.get("rest_pose") is not None else None),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise TopologyError(f"Malformed skeleton document '{name}': {e}") from e

    def to_dict(self) -> dict:
        doc = {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "edges": [list(e) for e in self.edges],
            "flip_pairs": [list(p) for p in self.flip_pairs],
            "oks_sigmas": list(self.oks_sigmas),
        }
        if self.rest_pose is not None:
            doc["rest_pose"] = [list(p) for p in self.rest_pose]
        return doc

    def to_json(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def flip_permutation(self) -> List[int]:
        perm = list(range(self.num_joints))
        for left, right in self.flip_pairs:
            perm[left], perm[right] = right, left
        return perm

    def permuted(self, perm: Sequence[int]) -> "SkeletonSpec":
        """
        Relabel joints: new joint k is old joint perm[k].
        Edges, flip pairs, sigmas and the rest pose follow their joints.
        """
        inverse = {old: new for new, old in enumerate(perm)}
        return SkeletonSpec(
            name=f"{self.name}-permuted",
            joint_names=tuple(self.joint_names[p] for p in perm),
            edges=tuple((inverse[i], inverse[j]) for i, j in self.edges),
            flip_pairs=tuple((inverse[i], inverse[j]) for i, j in self.flip_pairs),
            oks_sigmas=tuple(self.oks_sigmas[p] for p in perm),
            rest_pose=tuple(self.rest_pose[p] for p in perm) if self.rest_pose is not None else None,
        )


@dataclass(frozen=True)
class AdjacencyMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = self.entries
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise TopologyError(f"Adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise TopologyError("Adjacency must be symmetric")
        if not np.all(np.diag(a) == 1):
            raise TopologyError("Adjacency diagonal must be all ones")
        if not np.all((a == 0) | (a == 1)):
            raise TopologyError("Adjacency entries must be binary")
        a.setflags(write=False)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def nnz(self) -> int:
        return int(self.entries.sum())

    def degrees(self) -> np.ndarray:
        """Neighbour counts including the self-loop"""
        return self.entries.sum(axis=1)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.entries, dtype=dtype)


@dataclass(frozen=True)
class CoupleGraphSpec:
    base: SkeletonSpec
    adjacency: AdjacencyMatrix
    skeleton_edges: Tuple[Tuple[int, int], ...] = field(default_factory=tuple)
    interaction_edges: Tuple[Tuple[int, int], ...] = field(default_factory=tuple)


def build_adjacency(skeleton: SkeletonSpec) -> AdjacencyMatrix:
    n = skeleton.num_joints
    a = np.eye(n, dtype=np.int64)
    for i, j in skeleton.edges:
        if not (0 <= i < n and 0 <= j < n):
            raise TopologyError(f"Edge ({i}, {j}) out of range for {n} joints")
        a[i, j] = a[j, i] = 1
    return AdjacencyMatrix(a)


def build_couple_graph(skeleton: SkeletonSpec) -> CoupleGraphSpec:
    """Two copies of the skeleton plus an edge between each joint and its counterpart"""
    n = skeleton.num_joints
    single = build_adjacency(skeleton).entries

    a = np.zeros((2 * n, 2 * n), dtype=np.int64)
    a[:n, :n] = single
    a[n:, n:] = single
    interaction = tuple((i, i + n) for i in range(n))
    for i, j in interaction:
        a[i, j] = a[j, i] = 1

    skeleton_edges = tuple(skeleton.edges) + tuple((i + n, j + n) for i, j in skeleton.edges)
    return CoupleGraphSpec(skeleton, AdjacencyMatrix(a), skeleton_edges, interaction)


def normalized_adjacency(adjacency: AdjacencyMatrix, dtype=torch.float32) -> torch.Tensor:
    """Row-normalized D^-1 A, i.e. the mean over each node's neighbourhood"""
    a = adjacency.tensor(dtype)
    return a / a.sum(dim=1, keepdim=True)


# ---------------------------------------------------------
# Coordinate frames
# ---------------------------------------------------------
def crop_extent(width: int, height: int) -> BoundingBox:
    """
    Box covering a pixel grid whose pixel centres sit at integer coordinates.
    Normalizing with it matches align-corners-false bilinear sampling.
    """
    return BoundingBox(-0.5, -0.5, width - 0.5, height - 0.5)


def _box_params(box: BoundingBox, like: torch.Tensor):
    if not (box.width > 0 and box.height > 0):
        raise DataError(f"Degenerate box {box.as_list()}")
    center = torch.tensor(box.center, dtype=like.dtype, device=like.device)
    half = torch.tensor((box.width / 2.0, box.height / 2.0), dtype=like.dtype, device=like.device)
    return center, half


def normalize_pose(pose, box: BoundingBox):
    """Map pixel coordinates into the box frame: centre -> (0, 0), corners -> (+-1, +-1)"""
    if pose.frame != PIXEL:
        raise DataError(f"normalize_pose expects pixel coordinates, got '{pose.frame}'")
    center, half = _box_params(box, pose.coords)
    return pose.with_coords((pose.coords - center) / half, frame=NORMALIZED)


def denormalize_pose(pose, box: BoundingBox):
    if pose.frame != NORMALIZED:
        raise DataError(f"denormalize_pose expects normalized coordinates, got '{pose.frame}'")
    center, half = _box_params(box, pose.coords)
    return pose.with_coords(pose.coords * half + center, frame=PIXEL)


# ---------------------------------------------------------
# Loading
# ---------------------------------------------------------
def load_skeleton(name_or_path: Union[str, Path, None] = None) -> SkeletonSpec:
    """Load a bundled skeleton by name or any skeleton JSON document by path"""
    name_or_path = name_or_path or SKELETON_CONFIG["default"]
    path = Path(name_or_path)
    if not path.suffix:
        path = Path(SKELETON_CONFIG["bundled_dir"]) / f"{name_or_path}.json"

    if not path.exists():
        raise TopologyError(f"Skeleton '{name_or_path}' not found")

    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise TopologyError(f"Skeleton file {path} is not valid JSON: {e}") from e

    skeleton = SkeletonSpec.from_dict(doc, name=path.stem)
    logger.debug(f"Loaded skeleton '{skeleton.name}' with {skeleton.num_joints} joints")
    return skeleton
