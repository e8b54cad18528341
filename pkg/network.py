"""
OPECNet: heatmap stage + correction stage assembled into one module
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from adaption import AdaptedPyramid, CascadedFeatureAdaption
from backbone import Backbone, HeatmapHead, heatmap_to_normalized, soft_argmax
from config import MODEL_CONFIG, TRAINING_CONFIG
from errors import ConfigError, ShapeError
from correction import CoupleGraphRefiner, IGPGCN, RefinementTrace, couple_tags
from poses import BoundingBox, Pose
from skeleton import SkeletonSpec, build_adjacency, build_couple_graph, normalized_adjacency

logger = logging.getLogger(__name__)

ABLATION_KEYS = ("image_guided", "progressive", "multi_scale_features", "cfa_enabled", "fusion_enabled")


def ablation_switches(source: Optional[dict] = None) -> Dict[str, bool]:
    source = source or TRAINING_CONFIG
    return {key: bool(source.get(key, True)) for key in ABLATION_KEYS}


@dataclass
class NetworkOutput:
    heatmaps: torch.Tensor
    initial_pose: Pose                 # normalized frame
    trace: RefinementTrace
    adapted: AdaptedPyramid


class OPECNet(nn.Module):
    def __init__(self, skeleton: SkeletonSpec, cfg: Optional[dict] = None,
                 switches: Optional[Dict[str, bool]] = None, couple_graph: bool = False):
        super().__init__()
        cfg = dict(cfg or MODEL_CONFIG)
        switches = ablation_switches(switches)
        self.cfg = cfg
        self.switches = switches
        self.skeleton = skeleton
        self.heatmap_size = tuple(cfg["heatmap_size"])
        self.softmax_beta = float(cfg.get("softmax_beta", 1.0))
        if not self.softmax_beta > 0:
            raise ConfigError(f"softmax_beta must be positive, got {self.softmax_beta}")
        n = skeleton.num_joints

        self.backbone = Backbone(cfg)
        channels = self.backbone.pyramid_channels
        self.cfa = CascadedFeatureAdaption(channels, enabled=switches["cfa_enabled"],
                                           fusion_enabled=switches["fusion_enabled"])
        self.heatmap_head = HeatmapHead(channels[2], n, cfg["heatmap_kernel"])
        self.gcn = IGPGCN(n, channels, cfg,
                          image_guided=switches["image_guided"],
                          progressive=switches["progressive"],
                          multi_scale_features=switches["multi_scale_features"])

        self.register_buffer("adjacency", normalized_adjacency(build_adjacency(skeleton)))
        self.couple = None
        if couple_graph:
            self.enable_couple_graph()

    def enable_couple_graph(self):
        if self.couple is None:
            spec = build_couple_graph(self.skeleton)
            self.couple = CoupleGraphRefiner(self.skeleton.num_joints,
                                             self.backbone.pyramid_channels[2], self.cfg)
            self.register_buffer("couple_adjacency", normalized_adjacency(spec.adjacency))
            self.couple.to(self.adjacency.device, self.adjacency.dtype)
        return self.couple

    def base_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("couple.")]

    def forward(self, crops: torch.Tensor) -> NetworkOutput:
        pyramid = self.backbone(crops)
        adapted = self.cfa(pyramid)
        heatmaps = self.heatmap_head(adapted.F3)

        initial = heatmap_to_normalized(soft_argmax(heatmaps, self.softmax_beta), self.heatmap_size)
        trace = self.gcn(initial, adapted, self.adjacency)
        return NetworkOutput(heatmaps, initial, trace, adapted)

    def refine_pair(self, final: Pose, fine: torch.Tensor, index_a: Sequence[int], index_b: Sequence[int],
                    boxes_a: Sequence[BoundingBox], boxes_b: Sequence[BoundingBox]) -> Tuple[Pose, Pose]:
        """
        Run the CoupleGraph refiner on pairs of instances of one batch.
        Pair k couples item index_a[k] (box boxes_a[k]) with item index_b[k].

        Args:
            final: batched Final poses (normalized frame)
            fine: batched F3_hat maps the refiner samples from

        Returns:
            Refined (a, b) poses, each batched over the pairs
        """
        if self.couple is None:
            raise ConfigError("CoupleGraph refiner is not enabled")
        if not index_a or not (len(index_a) == len(index_b) == len(boxes_a) == len(boxes_b)):
            raise ShapeError("refine_pair needs at least one pair and one box per paired index")

        dtype = final.coords.dtype
        tags = [couple_tags(a, b, dtype=dtype) for a, b in zip(boxes_a, boxes_b)]
        tag_a = torch.stack([t[0] for t in tags])
        tag_b = torch.stack([t[1] for t in tags])
        ia = torch.as_tensor(list(index_a), dtype=torch.long, device=final.coords.device)
        ib = torch.as_tensor(list(index_b), dtype=torch.long, device=final.coords.device)
        return self.couple(final.select(ia), final.select(ib), fine[ia], fine[ib],
                           tag_a, tag_b, self.couple_adjacency)
