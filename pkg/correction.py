"""
Pose Correction: Image-Guided Progressive GCN and the CoupleGraph refiner.

Node features are node-major tensors of shape (B, M, C).
"""
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import MODEL_CONFIG
from errors import NumericError, ShapeError, TopologyError
from evaluation import iou
from poses import NORMALIZED, BoundingBox, Pose
from skeleton import AdjacencyMatrix, normalize_pose, normalized_adjacency

logger = logging.getLogger(__name__)


def _as_adjacency(adjacency: Union[AdjacencyMatrix, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if isinstance(adjacency, AdjacencyMatrix):
        adjacency = normalized_adjacency(adjacency)
    return adjacency.to(dtype=like.dtype, device=like.device)


def grid_sample_joints(featmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """
    Bilinear read of featmap at normalized joint coordinates.

    featmap: (B, C, H, W) or (C, H, W); coords: (B, N, 2) or (N, 2) in [-1, 1]
    (out-of-range coordinates are clamped to the border). Returns (B, N, C) or (N, C).
    """
    if not bool(torch.isfinite(coords).all()):
        raise NumericError("Cannot sample features at non-finite joint coordinates")

    unbatched = featmap.dim() == 3
    if unbatched:
        featmap, coords = featmap.unsqueeze(0), coords.unsqueeze(0)
    if featmap.shape[0] != coords.shape[0]:
        raise ShapeError(f"Batch mismatch: {featmap.shape[0]} maps vs {coords.shape[0]} poses")

    grid = coords.clamp(-1.0, 1.0).unsqueeze(2)                  # (B, N, 1, 2)
    sampled = F.grid_sample(featmap, grid, mode="bilinear",
                            padding_mode="border", align_corners=False)
    sampled = sampled.squeeze(-1).transpose(1, 2)                # (B, N, C)
    return sampled[0] if unbatched else sampled


class GCNLayer(nn.Module):
    """x_i' = ReLU(W_self x_i + W_neigh mean_{j in N(i)} x_j + b)"""

    def __init__(self, in_channels: int, out_channels: int, activation: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.self_linear = nn.Linear(in_channels, out_channels)
        self.neigh_linear = nn.Linear(in_channels, out_channels, bias=False)
        self.activation = activation

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"GCN layer expects {self.in_channels} channels, got {x.shape[-1]}")
        out = self.self_linear(x) + self.neigh_linear(torch.matmul(adjacency, x))
        return F.relu(out) if self.activation else out


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over nodes, added residually"""

    def __init__(self, channels: int, heads: int = 1):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out, _ = self.attn(x, x, x, need_weights=False)
        return x + out


class ResGCNAttentionBlock(nn.Module):
    """
    Main path: two stacked GCN layers. Skip path: one GCN layer that adjusts the
    channel count (optionally fed extra features). Output: attention(main + skip).
    """

    def __init__(self, in_channels: int, out_channels: int, skip_extra: int = 0, heads: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.skip_extra = skip_extra
        self.main = nn.ModuleList([GCNLayer(in_channels, out_channels),
                                   GCNLayer(out_channels, out_channels)])
        self.skip = GCNLayer(in_channels + skip_extra, out_channels)
        self.attention = SelfAttention(out_channels, heads)

    def forward(self, node_feats: torch.Tensor, sampled: torch.Tensor, adjacency: torch.Tensor,
                extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = torch.cat([node_feats, sampled], dim=-1)
        if x.shape[-1] != self.in_channels:
            raise ShapeError(
                f"ResGCN block expects {self.in_channels} input channels, got {x.shape[-1]}"
            )

        main = x
        for layer in self.main:
            main = layer(main, adjacency)

        skip_in = x
        if self.skip_extra:
            if extra is None or extra.shape[-1] != self.skip_extra:
                raise ShapeError(f"ResGCN block expects {self.skip_extra} extra skip channels")
            skip_in = torch.cat([x, extra], dim=-1)

        return self.attention(main + self.skip(skip_in, adjacency))


class DisplacementHead(nn.Linear):
    """Per-node 2D displacement, zero-initialized so refinement starts at the identity"""

    def __init__(self, in_channels: int):
        super().__init__(in_channels, 2)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


@dataclass
class RefinementTrace:
    pose1: Pose
    pose2: Pose
    final: Pose
    node_features: List[torch.Tensor] = field(default_factory=list)

    @property
    def poses(self) -> Tuple[Pose, Pose, Pose]:
        return self.pose1, self.pose2, self.final

    def to_json(self) -> str:
        doc = {
            name: pose.detach().numpy().tolist()
            for name, pose in zip(("pose1", "pose2", "final"), self.poses)
        }
        doc["frame"] = self.final.frame
        return json.dumps(doc)


def block_levels(progressive: bool = True, multi_scale_features: bool = True) -> List[int]:
    """Pyramid level sampled by each block: coarse -> fine, or F3 only"""
    if not progressive:
        return [2]
    return [0, 1, 2] if multi_scale_features else [2, 2, 2]


class IGPGCN(nn.Module):
    def __init__(self, num_joints: int, pyramid_channels: Sequence[int], cfg: Optional[dict] = None,
                 image_guided: bool = True, progressive: bool = True,
                 multi_scale_features: bool = True):
        super().__init__()
        cfg = cfg or MODEL_CONFIG
        embed = cfg["embed_channels"]
        width = cfg["block_channels"]
        heads = cfg.get("attention_heads", 1)

        self.num_joints = num_joints
        self.image_guided = image_guided
        self.levels = block_levels(progressive, multi_scale_features)
        self.sampled_channels = [pyramid_channels[level] for level in self.levels]

        self.embed = nn.ModuleList([GCNLayer(3, embed), GCNLayer(embed, embed)])

        blocks = []
        in_ch = embed
        for k, c in enumerate(self.sampled_channels):
            last = k == len(self.levels) - 1
            blocks.append(ResGCNAttentionBlock(in_ch + c, width, skip_extra=embed if last else 0,
                                               heads=heads))
            in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList([DisplacementHead(width) for _ in self.levels])

    def forward(self, init_pose: Pose, adapted, adjacency) -> RefinementTrace:
        if init_pose.frame != NORMALIZED:
            raise ShapeError("IGP-GCN expects an initial pose in the normalized frame")
        if init_pose.num_joints != self.num_joints:
            raise ShapeError(f"Expected {self.num_joints} joints, got {init_pose.num_joints}")

        coords = init_pose.coords
        adj = _as_adjacency(adjacency, coords)

        h = torch.cat([coords, init_pose.confidence.unsqueeze(-1)], dim=-1)
        for layer in self.embed:
            h = layer(h, adj)
        embedding = h

        poses, features = [], []
        for k, (level, block, head) in enumerate(zip(self.levels, self.blocks, self.heads)):
            fmap = adapted[level]
            if self.image_guided:
                sampled = grid_sample_joints(fmap, coords)
            else:
                sampled = coords.new_zeros(coords.shape[:-1] + (fmap.shape[-3],))

            last = k == len(self.levels) - 1
            h = block(h, sampled, adj, extra=embedding if last else None)
            coords = coords + head(h)
            poses.append(init_pose.with_coords(coords))
            features.append(h)

        while len(poses) < 3:
            poses.insert(0, poses[0])
        return RefinementTrace(poses[0], poses[1], poses[2], features)


def resgcn_attention_block(node_feats: torch.Tensor, sampled: torch.Tensor, adjacency,
                           block: ResGCNAttentionBlock, extra: Optional[torch.Tensor] = None):
    return block(node_feats, sampled, _as_adjacency(adjacency, node_feats), extra)


def igp_gcn_forward(init_pose: Pose, adapted, adjacency, gcn: IGPGCN) -> RefinementTrace:
    return gcn(init_pose, adapted, adjacency)


# ---------------------------------------------------------
# CoupleGraph
# ---------------------------------------------------------
def pair_people(instances: Sequence[Tuple[BoundingBox, Pose]]) -> List[Tuple[int, int]]:
    """Greedy matching by descending box IoU; ties go to the lower index pair"""
    candidates = []
    for i in range(len(instances)):
        for j in range(i + 1, len(instances)):
            overlap = iou(instances[i][0], instances[j][0])
            if overlap > 0:
                candidates.append((-overlap, i, j))
    candidates.sort()

    paired, pairs = set(), []
    for _, i, j in candidates:
        if i not in paired and j not in paired:
            pairs.append((i, j))
            paired.update((i, j))
    return pairs


def couple_tags(box_a: BoundingBox, box_b: BoundingBox, dtype=torch.float32):
    """
    Each instance's box centre in the [-1, 1] frame of the pair's union box.
    Identical boxes get identical tags: the couple graph stays swap-symmetric and
    the two instances are then told apart only by their poses and features.
    """
    union = BoundingBox(min(box_a.x1, box_b.x1), min(box_a.y1, box_b.y1),
                        max(box_a.x2, box_b.x2), max(box_a.y2, box_b.y2))
    centers = Pose.from_array([box_a.center, box_b.center])
    tags = normalize_pose(centers, union).coords.to(dtype)
    return tags[0], tags[1]


class CoupleGraphRefiner(nn.Module):
    """One embedding layer and one ResGCN block over the 2N-node couple graph"""

    def __init__(self, num_joints: int, feature_channels: int, cfg: Optional[dict] = None):
        super().__init__()
        cfg = cfg or MODEL_CONFIG
        embed = cfg["couple_embed_channels"]
        width = cfg["couple_block_channels"]
        self.num_joints = num_joints
        self.embed = GCNLayer(5, embed)
        self.block = ResGCNAttentionBlock(embed + feature_channels, width,
                                          heads=cfg.get("attention_heads", 1))
        self.head = DisplacementHead(width)

    def forward(self, pose_a: Pose, pose_b: Pose, fmap_a: torch.Tensor, fmap_b: torch.Tensor,
                tag_a: torch.Tensor, tag_b: torch.Tensor, adjacency) -> Tuple[Pose, Pose]:
        n = self.num_joints
        if pose_a.num_joints != n or pose_b.num_joints != n:
            raise TopologyError(
                f"CoupleGraph built for {n} joints, got {pose_a.num_joints} and {pose_b.num_joints}"
            )

        def node_inputs(pose, tag):
            tag = tag.to(pose.coords).unsqueeze(-2).expand(pose.coords.shape[:-2] + (n, 2))
            return torch.cat([pose.coords, pose.confidence.unsqueeze(-1), tag], dim=-1)

        x = torch.cat([node_inputs(pose_a, tag_a), node_inputs(pose_b, tag_b)], dim=-2)
        sampled = torch.cat([grid_sample_joints(fmap_a, pose_a.coords),
                             grid_sample_joints(fmap_b, pose_b.coords)], dim=-2)
        adj = _as_adjacency(adjacency, x)

        h = self.block(self.embed(x, adj), sampled, adj)
        disp = self.head(h)
        return (pose_a.with_coords(pose_a.coords + disp[..., :n, :]),
                pose_b.with_coords(pose_b.coords + disp[..., n:, :]))


def couple_graph_forward(pose_a: Pose, pose_b: Pose, fmap_a, fmap_b, tag_a, tag_b, adjacency,
                         refiner: CoupleGraphRefiner) -> Tuple[Pose, Pose]:
    return refiner(pose_a, pose_b, fmap_a, fmap_b, tag_a, tag_b, adjacency)
