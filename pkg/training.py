"""
Training: masked L1 objective, proposal filtering, flip augmentation and the
two-phase optimization loop (OPEC network, then the optional CoupleGraph refiner)
"""
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from config import SYSTEM_SETTINGS, TRAINING_CONFIG
from correction import RefinementTrace, pair_people
from errors import ConfigError, DataError, NumericError
from evaluation import compute_oks
from network import ABLATION_KEYS, OPECNet
from poses import NORMALIZED, PIXEL, BoundingBox, GroundTruthPose, Pose, stack_ground_truth
from skeleton import SkeletonSpec
from store import LOSS_COLUMNS, load_checkpoint, restore_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    lambdas: Tuple[float, float, float] = tuple(TRAINING_CONFIG["lambdas"])
    learning_rate: float = TRAINING_CONFIG["learning_rate"]
    epochs: int = TRAINING_CONFIG["epochs"]
    batch_size: int = TRAINING_CONFIG["batch_size"]
    seed: int = TRAINING_CONFIG["seed"]
    couple_graph_enabled: bool = TRAINING_CONFIG["couple_graph_enabled"]
    couple_epochs: int = TRAINING_CONFIG["couple_epochs"]
    flip_prob: float = TRAINING_CONFIG["flip_prob"]
    min_visible_joints: int = TRAINING_CONFIG["min_visible_joints"]
    min_proposal_oks: float = TRAINING_CONFIG["min_proposal_oks"]
    image_guided: bool = TRAINING_CONFIG["image_guided"]
    progressive: bool = TRAINING_CONFIG["progressive"]
    multi_scale_features: bool = TRAINING_CONFIG["multi_scale_features"]
    cfa_enabled: bool = TRAINING_CONFIG["cfa_enabled"]
    fusion_enabled: bool = TRAINING_CONFIG["fusion_enabled"]
    checkpoint_every_epoch: bool = TRAINING_CONFIG["checkpoint_every_epoch"]

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if len(self.lambdas) != 3:
            raise ConfigError(f"lambdas needs 3 values, got {len(self.lambdas)}")
        if any(v < 0 for v in self.lambdas) or not self.lambdas[2] > 0:
            raise ConfigError(f"lambdas must be non-negative with a positive final weight: {self.lambdas}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.couple_epochs < 0:
            raise ConfigError("couple_epochs must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")

    @classmethod
    def from_dict(cls, overrides: Optional[dict] = None) -> "TrainingConfig":
        """Defaults from TRAINING_CONFIG, overridden key by key; unknown keys are rejected"""
        known = {f.name for f in fields(cls)}
        doc = dict(TRAINING_CONFIG)
        for key, value in (overrides or {}).items():
            if key not in known:
                raise ConfigError(f"Unknown training config key '{key}'")
            doc[key] = value
        return cls(**{k: v for k, v in doc.items() if k in known})

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambdas"] = list(self.lambdas)
        return doc

    @property
    def switches(self) -> Dict[str, bool]:
        return {key: getattr(self, key) for key in ABLATION_KEYS}


@dataclass
class InstanceSample:
    """One cropped person: pixels plus ground truth in the crop's normalized frame"""

    pixels: torch.Tensor               # (C, H, W)
    gt: GroundTruthPose
    image_id: int = 0
    instance_index: int = 0
    box: Optional[BoundingBox] = None  # source-image box
    transform: Optional[object] = None
    partner: Optional[int] = None      # annotated partner's instance_index
    instance_id: Optional[int] = None

    @property
    def visible_count(self) -> int:
        return int(self.gt.visible.sum())


# ---------------------------------------------------------
# Losses
# ---------------------------------------------------------
def masked_l1(pred: Pose, gt: GroundTruthPose, frame: str = NORMALIZED) -> torch.Tensor:
    """
    Sum of |dx| + |dy| over labeled joints divided by the labeled count.
    Unlabeled joints contribute neither value nor gradient.
    """
    if pred.frame != frame or gt.frame != frame:
        raise DataError(f"masked_l1 expects '{frame}' poses, got {pred.frame} and {gt.frame}")

    mask = gt.labeled.bool().to(pred.coords.device)
    err = (pred.coords - gt.coords.to(pred.coords)).abs().sum(dim=-1)
    err = torch.where(mask, err, torch.zeros_like(err))

    count = int(mask.sum())
    if count == 0:
        return err.sum()
    return err.sum() / count


def loss_terms(trace: RefinementTrace, init_pose: Pose, gt: GroundTruthPose) -> Dict[str, torch.Tensor]:
    terms = {"init": masked_l1(init_pose, gt)}
    for name, pose in zip(("pose1", "pose2", "final"), trace.poses):
        terms[name] = masked_l1(pose, gt)
    return terms


def total_loss(trace: RefinementTrace, init_pose: Pose, gt: GroundTruthPose,
               lambdas: Sequence[float] = tuple(TRAINING_CONFIG["lambdas"])):
    """
    sum_j lambda_j * L1(pose_j) + L1(init_pose)

    Returns:
        (total, terms) where terms holds the unweighted per-pose losses
    """
    terms = loss_terms(trace, init_pose, gt)
    weighted = sum(lam * terms[name] for lam, name in zip(lambdas, ("pose1", "pose2", "final")))
    return weighted + terms["init"], terms


# ---------------------------------------------------------
# Proposals and augmentation
# ---------------------------------------------------------
def select_proposals(candidates: Sequence[Tuple[Pose, GroundTruthPose]], sigmas,
                     min_visible: int = TRAINING_CONFIG["min_visible_joints"],
                     min_oks: float = TRAINING_CONFIG["min_proposal_oks"]) -> List[int]:
    """
    Keep a candidate when its target has more than `min_visible` visible joints
    and the candidate's OKS against it exceeds `min_oks`.

    Returns:
        Indices of the kept candidates, in input order
    """
    kept = []
    for i, (pose, gt) in enumerate(candidates):
        if int(gt.visible.sum()) <= min_visible:
            continue
        if compute_oks(pose, gt, gt.object_area(), sigmas) > min_oks:
            kept.append(i)
    return kept


def flip_pose(pose, skeleton: SkeletonSpec, width: Optional[int] = None):
    """
    Mirror a pose horizontally and swap left/right joints.
    Pixel frame: x -> (W - 1) - x. Normalized frame: x -> -x.
    """
    perm = torch.as_tensor(skeleton.flip_permutation(), device=pose.coords.device)
    coords = pose.coords.index_select(-2, perm)
    if pose.frame == PIXEL:
        if width is None:
            raise DataError("Flipping pixel coordinates needs the image width")
        x = (width - 1) - coords[..., 0]
    else:
        x = -coords[..., 0]
    coords = torch.stack([x, coords[..., 1]], dim=-1)

    if isinstance(pose, GroundTruthPose):
        return replace(pose, coords=coords,
                       labeled=pose.labeled.index_select(-1, perm),
                       visible=pose.visible.index_select(-1, perm))
    return replace(pose, coords=coords, confidence=pose.confidence.index_select(-1, perm))


def flip_augment(sample: InstanceSample, skeleton: SkeletonSpec) -> InstanceSample:
    pixels = torch.flip(sample.pixels, dims=[-1])
    return replace(sample, pixels=pixels, gt=flip_pose(sample.gt, skeleton, sample.pixels.shape[-1]))


def collate(samples: Sequence[InstanceSample]):
    crops = torch.stack([s.pixels for s in samples])
    gt = stack_ground_truth([s.gt for s in samples])
    return crops, gt


# ---------------------------------------------------------
# Determinism
# ---------------------------------------------------------
def seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.set_num_threads(SYSTEM_SETTINGS["num_threads"])
    if SYSTEM_SETTINGS["deterministic"]:
        torch.use_deterministic_algorithms(True)


def pair_samples(samples: Sequence[InstanceSample]) -> List[Tuple[int, int]]:
    """Annotated partners first, otherwise greedy pairing by box overlap"""
    by_image = defaultdict(list)
    for i, s in enumerate(samples):
        by_image[s.image_id].append(i)

    pairs = []
    for image_id in sorted(by_image, key=str):
        idxs = by_image[image_id]
        lookup = {samples[i].instance_index: i for i in idxs}
        annotated = []
        for i in idxs:
            partner = samples[i].partner
            if partner is not None and partner in lookup and samples[i].instance_index < partner:
                annotated.append((i, lookup[partner]))
        if annotated:
            pairs.extend(annotated)
            continue

        boxed = [i for i in idxs if samples[i].box is not None]
        matched = pair_people([(samples[i].box, None) for i in boxed])
        pairs.extend((boxed[a], boxed[b]) for a, b in matched)
    return pairs


# ---------------------------------------------------------
# Trainer
# ---------------------------------------------------------
class Trainer:
    """Adam + per-step cosine annealing to zero, seeded shuffling and flips per epoch"""

    def __init__(self, model: OPECNet, cfg: TrainingConfig, store=None):
        self.model = model
        self.cfg = cfg
        self.store = store
        self.history: List[dict] = []
        self.checkpoints: List[str] = []
        self.step = 0

    # -- helpers ---------------------------------------------------------
    def _epoch_order(self, count: int, epoch: int, phase_offset: int = 0):
        gen = torch.Generator().manual_seed(self.cfg.seed + epoch + phase_offset)
        order = torch.randperm(count, generator=gen).tolist()
        flips = (torch.rand(count, generator=gen) < self.cfg.flip_prob).tolist()
        return order, flips

    def _batches(self, order: List[int]):
        size = self.cfg.batch_size
        for start in range(0, len(order), size):
            yield order[start:start + size]

    def _check_finite(self, loss: torch.Tensor, final: torch.Tensor, batch_id: int):
        if bool(torch.isfinite(loss)):
            return
        joint = None
        if final.grad is not None:
            grad = torch.nan_to_num(final.grad.abs(), nan=float("inf"))
            joint = int(grad.sum(dim=-1).reshape(-1, final.shape[-2]).sum(dim=0).argmax())
        raise NumericError(f"Non-finite loss at batch {batch_id} (joint {joint})",
                           batch_id=batch_id, joint=joint)

    def _log_row(self, epoch: int, lr: float, loss: torch.Tensor, terms: Dict[str, torch.Tensor]):
        row = {"step": self.step, "epoch": epoch, "lr": lr, "loss": float(loss)}
        for name in LOSS_COLUMNS[4:]:
            row[name] = float(terms[name]) if name in terms else 0.0
        self.history.append(row)

    def _build_optimizer(self, params, total_steps: int):
        optimizer = torch.optim.Adam(params, lr=self.cfg.learning_rate)
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=max(total_steps, 1), eta_min=0.0)
        return optimizer, scheduler

    def _load_state(self, resume_from) -> Optional[dict]:
        """Restore weights, step count and loss history; returns the checkpoint state"""
        if resume_from is None:
            return None
        state = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
        restore_model(state, self.model)
        self.step = state.get("step", 0)
        self.history = list(state.get("history", []))
        return state

    def _resume(self, optimizer, scheduler, state: Optional[dict], phase: str, epochs: int,
                offset: int = 0) -> int:
        """First epoch of `phase` still to run; optimizer and scheduler come back on a phase match"""
        if state is None:
            return 0
        if state.get("phase", "base") != phase:
            if phase == "base":
                # a couple-phase checkpoint already holds a fully trained base
                logger.info("🔄 Checkpoint is past the base phase: skipping it")
                return epochs
            return 0
        optimizer.load_state_dict(state["optimizer"])
        scheduler.load_state_dict(state["scheduler"])
        logger.info(f"🔄 Resuming {phase} training after epoch {state['epoch']}")
        return state["epoch"] - offset

    def _save(self, epoch: int, optimizer, scheduler, phase: str):
        if self.store is None or not self.cfg.checkpoint_every_epoch:
            return
        path = self.store.save_checkpoint(
            self.model, epoch=epoch, step=self.step, phase=phase,
            optimizer=optimizer, scheduler=scheduler,
            config=self.cfg.to_dict(), history=self.history,
        )
        self.checkpoints.append(str(path))
        self.store.write_loss_log(self.history)

    # -- phase 1 ---------------------------------------------------------
    def train_step(self, batch: List[InstanceSample], optimizer, scheduler, epoch: int, batch_id: int):
        crops, gt = collate(batch)
        lr = optimizer.param_groups[0]["lr"]

        optimizer.zero_grad()
        try:
            out = self.model(crops)
        except NumericError as e:
            raise NumericError(f"Batch {batch_id}: {e}", batch_id=batch_id) from e

        final = out.trace.final.coords
        final.retain_grad()
        loss, terms = total_loss(out.trace, out.initial_pose, gt, self.cfg.lambdas)
        loss.backward()
        self._check_finite(loss, final, batch_id)

        optimizer.step()
        scheduler.step()
        self.step += 1
        self._log_row(epoch, lr, loss, terms)
        return float(loss)

    def train(self, samples: Sequence[InstanceSample], epochs: Optional[int] = None,
              resume_from=None) -> List[dict]:
        """
        Phase 1: end-to-end training of the OPEC network.

        Args:
            samples: crops with normalized ground truth
            epochs: overrides cfg.epochs
            resume_from: checkpoint path (or loaded state) to continue from

        Returns:
            The loss log rows
        """
        epochs = epochs or self.cfg.epochs
        samples = [s for s in samples if s.visible_count > self.cfg.min_visible_joints]
        if not samples:
            raise DataError("No training samples with enough visible joints")
        logger.info(f"🔄 Training on {len(samples)} instances for {epochs} epochs")

        steps_per_epoch = -(-len(samples) // self.cfg.batch_size)
        state = self._load_state(resume_from)
        self.model.train()
        optimizer, scheduler = self._build_optimizer(self.model.base_parameters(),
                                                     epochs * steps_per_epoch)
        start = self._resume(optimizer, scheduler, state, "base", epochs)

        for epoch in range(start, epochs):
            order, flips = self._epoch_order(len(samples), epoch)
            for batch_id, idxs in enumerate(self._batches(order)):
                batch = [flip_augment(samples[i], self.model.skeleton) if flips[i] else samples[i]
                         for i in idxs]
                self.train_step(batch, optimizer, scheduler, epoch, batch_id)

            last = self.history[-1]["loss"] if self.history else float("nan")
            logger.info(f"✅ Epoch {epoch + 1}/{epochs} done (loss {last:.4f})")
            self._save(epoch + 1, optimizer, scheduler, "base")

        return self.history

    # -- phase 2 ---------------------------------------------------------
    def _freeze_base(self):
        """Base weights stop learning and BatchNorm statistics stop moving"""
        couple = self.model.enable_couple_graph()
        for p in self.model.base_parameters():
            p.requires_grad_(False)
        self.model.eval()
        couple.train()
        return couple

    def _final_poses(self, samples: Sequence[InstanceSample]):
        with torch.no_grad():
            crops, _ = collate(samples)
            return self.model(crops)

    def train_couple(self, samples: Sequence[InstanceSample], epochs: Optional[int] = None,
                     resume_from=None) -> List[dict]:
        """
        Phase 2: the base network is frozen and only the CoupleGraph refiner learns,
        on pairs whose two proposals both pass select_proposals.
        A couple-phase checkpoint in `resume_from` continues after its epoch;
        base-phase checkpoints are ignored here.
        """
        epochs = self.cfg.couple_epochs if epochs is None else epochs
        state = None
        if resume_from is not None:
            state = resume_from if isinstance(resume_from, dict) else load_checkpoint(resume_from)
            state = self._load_state(state) if state.get("phase") == "couple" else None
        couple = self._freeze_base()

        pairs = pair_samples(samples)
        if pairs:
            out = self._final_poses(samples)
            candidates = [(out.trace.final.select(i), s.gt) for i, s in enumerate(samples)]
            kept = set(select_proposals(candidates, self.model.skeleton.oks_sigmas,
                                        self.cfg.min_visible_joints, self.cfg.min_proposal_oks))
            pairs = [(a, b) for a, b in pairs if a in kept and b in kept]

        if not pairs or epochs == 0:
            logger.warning("⚠️ No usable pairs: CoupleGraph refiner left untrained")
            return self.history

        steps_per_epoch = -(-len(pairs) // self.cfg.batch_size)
        optimizer, scheduler = self._build_optimizer(couple.parameters(), epochs * steps_per_epoch)
        offset = self.cfg.epochs
        start = self._resume(optimizer, scheduler, state, "couple", epochs, offset=offset)
        logger.info(f"🔄 CoupleGraph phase on {len(pairs)} pairs, epochs {start + 1}..{epochs}")

        for epoch in range(start, epochs):
            order, _ = self._epoch_order(len(pairs), epoch, phase_offset=offset)
            for batch_id, idxs in enumerate(self._batches(order)):
                batch = [pairs[i] for i in idxs]
                self.couple_step(samples, batch, optimizer, scheduler, offset + epoch, batch_id)
            logger.info(f"✅ CoupleGraph epoch {epoch + 1}/{epochs} done")
            self._save(offset + epoch + 1, optimizer, scheduler, "couple")

        return self.history

    def couple_step(self, samples, pairs, optimizer, scheduler, epoch: int, batch_id: int):
        self._freeze_base()
        a_idx = [a for a, _ in pairs]
        b_idx = [b for _, b in pairs]
        k = len(pairs)
        lr = optimizer.param_groups[0]["lr"]

        optimizer.zero_grad()
        out = self._final_poses([samples[i] for i in a_idx + b_idx])
        final = out.trace.final.coords.requires_grad_(True)
        refined_a, refined_b = self.model.refine_pair(
            out.trace.final, out.adapted.F3, list(range(k)), list(range(k, 2 * k)),
            [samples[i].box for i in a_idx], [samples[i].box for i in b_idx])

        gt_a = stack_ground_truth([samples[i].gt for i in a_idx])
        gt_b = stack_ground_truth([samples[i].gt for i in b_idx])
        terms = {"final": masked_l1(refined_a, gt_a) + masked_l1(refined_b, gt_b)}
        loss = terms["final"]
        loss.backward()
        self._check_finite(loss, final, batch_id)

        optimizer.step()
        scheduler.step()
        self.step += 1
        self._log_row(epoch, lr, loss, terms)
        return float(loss)


def train(samples: Sequence[InstanceSample], skeleton: SkeletonSpec, cfg: TrainingConfig,
          model_cfg: Optional[dict] = None, store=None, resume_from=None):
    """Build, seed and train a network; returns (model, trainer)"""
    seed_everything(cfg.seed)
    model = OPECNet(skeleton, model_cfg, switches=cfg.switches, couple_graph=cfg.couple_graph_enabled)
    trainer = Trainer(model, cfg, store)
    if resume_from is not None and not isinstance(resume_from, dict):
        resume_from = load_checkpoint(resume_from)
    trainer.train(samples, resume_from=resume_from)
    if cfg.couple_graph_enabled:
        trainer.train_couple(samples, resume_from=resume_from)
    return model, trainer
