from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import SMALL_MODEL
from correction import RefinementTrace
from errors import ConfigError, DataError, NumericError
from evaluation import compute_oks, mean_joint_error
from network import OPECNet
from poses import NORMALIZED, PIXEL, BoundingBox, GroundTruthPose, Pose
from store import RunStore
from training import (Trainer, TrainingConfig, flip_augment, flip_pose, masked_l1,
                      pair_samples, select_proposals, total_loss, train)


def npose(coords, requires_grad=False):
    coords = torch.as_tensor(coords, dtype=torch.float64).clone().requires_grad_(requires_grad)
    return Pose(coords, torch.ones(coords.shape[:-1], dtype=torch.float64), NORMALIZED)


def ngt(coords, labeled=None, visible=None):
    return GroundTruthPose.from_array(coords, labeled, visible, frame=NORMALIZED)


def quick_config(**overrides):
    doc = {"epochs": 2, "batch_size": 4, "seed": 3, "flip_prob": 0.5}
    doc.update(overrides)
    return TrainingConfig.from_dict(doc)


# ---------------------------------------------------------
# Losses
# ---------------------------------------------------------
def test_masked_l1_examples():
    gt = ngt([[0.0, 0.0], [5.0, 5.0]], labeled=[True, False], visible=[True, False])
    assert masked_l1(npose([[1.0, 2.0], [0.0, 0.0]]), gt).item() == 3.0
    assert masked_l1(npose([[0.0, 0.0], [9.0, 9.0]]), gt).item() == 0.0


def test_masked_l1_empty_mask_has_zero_gradient():
    pred = npose([[0.3, -0.2], [0.1, 0.9]], requires_grad=True)
    gt = ngt([[0.0, 0.0], [0.0, 0.0]], labeled=[False, False], visible=[False, False])
    loss = masked_l1(pred, gt)
    loss.backward()
    assert loss.item() == 0.0
    assert not bool(pred.coords.grad.any())


def test_masked_l1_frame_mismatch():
    pixel_pred = Pose.from_array([[0.0, 0.0]], frame=PIXEL)
    with pytest.raises(DataError):
        masked_l1(pixel_pred, ngt([[0.0, 0.0]]))


def test_total_loss_arithmetic():
    gt = ngt([[0.0, 0.0]])
    block = npose([[1.0, 1.0]])
    trace = RefinementTrace(block, block, block)
    loss, terms = total_loss(trace, npose([[2.0, 2.0]]), gt, (0.3, 0.5, 1.0))
    assert terms["final"].item() == 2.0 and terms["init"].item() == 4.0
    assert loss.item() == 0.3 * 2 + 0.5 * 2 + 1.0 * 2 + 4
    assert abs(loss.item() - 7.6) < 1e-12


def test_total_loss_perfect_prediction_is_zero():
    gt = ngt([[0.1, 0.2], [0.3, -0.4]])
    perfect = npose(gt.coords)
    loss, _ = total_loss(RefinementTrace(perfect, perfect, perfect), perfect, gt)
    assert loss.item() == 0.0


def test_unlabeled_joints_get_no_gradient():
    gt = ngt([[0.0, 0.0], [0.0, 0.0]], labeled=[True, False], visible=[True, False])
    poses = [npose([[0.5, 0.5], [0.7, -0.2]], requires_grad=True) for _ in range(4)]
    loss, _ = total_loss(RefinementTrace(*poses[:3]), poses[3], gt)
    loss.backward()
    for pose in poses:
        assert bool(pose.coords.grad[0].abs().gt(0).all())
        assert not bool(pose.coords.grad[1].any())


def test_zero_weights_block_gradients():
    gt = ngt([[0.0, 0.0]])
    poses = [npose([[0.5, -0.5]], requires_grad=True) for _ in range(4)]
    loss, _ = total_loss(RefinementTrace(*poses[:3]), poses[3], gt, (0.0, 0.0, 1.0))
    loss.backward()
    assert not bool(poses[0].coords.grad.any()) and not bool(poses[1].coords.grad.any())
    assert bool(poses[2].coords.grad.any()) and bool(poses[3].coords.grad.any())


def test_masked_l1_flip_invariance(skeleton, gen):
    coords = torch.rand(12, 2, generator=gen, dtype=torch.float64) * 2 - 1
    labeled = torch.rand(12, generator=gen) > 0.3
    gt = GroundTruthPose(torch.rand(12, 2, generator=gen, dtype=torch.float64) * 2 - 1,
                         labeled, labeled.clone(), NORMALIZED)
    pred = npose(coords)
    flipped = masked_l1(flip_pose(pred, skeleton), flip_pose(gt, skeleton))
    torch.testing.assert_close(flipped, masked_l1(pred, gt))


# ---------------------------------------------------------
# Proposal selection
# ---------------------------------------------------------
def proposal(visible_count, matched):
    """10 labeled joints on a grid; the first `matched` are predicted exactly"""
    coords = np.array([[k % 4, k // 4] for k in range(12)], dtype=np.float64)
    labeled = np.arange(12) < 10
    visible = np.arange(12) < visible_count
    gt = GroundTruthPose.from_array(coords, labeled, visible)
    pred = coords.copy()
    pred[matched:] += 100.0
    return Pose.from_array(pred), gt


def test_select_proposals_rules(skeleton):
    candidates = [proposal(4, 10), proposal(6, 2), proposal(6, 5)]
    sigmas = skeleton.oks_sigmas
    oks = [compute_oks(p, g, g.object_area(), sigmas) for p, g in candidates]
    assert oks[1] == pytest.approx(0.2)
    assert oks[2] == pytest.approx(0.5)
    assert select_proposals(candidates, sigmas, min_visible=5, min_oks=0.3) == [2]


# ---------------------------------------------------------
# Flip augmentation
# ---------------------------------------------------------
def test_flip_twice_is_identity(skeleton, tiny_samples):
    sample = tiny_samples[0]
    twice = flip_augment(flip_augment(sample, skeleton), skeleton)
    assert torch.equal(twice.pixels, sample.pixels)
    assert torch.equal(twice.gt.coords, sample.gt.coords)
    assert torch.equal(twice.gt.visible, sample.gt.visible)
    assert torch.equal(twice.gt.labeled, sample.gt.labeled)


def test_flip_swaps_left_and_right(skeleton):
    left_wrist = skeleton.joint_names.index("left_wrist")
    right_wrist = skeleton.joint_names.index("right_wrist")
    coords = np.arange(24, dtype=np.float64).reshape(12, 2)
    visible = np.zeros(12, dtype=bool)
    visible[right_wrist] = True
    gt = GroundTruthPose.from_array(coords, visible=visible)

    flipped = flip_pose(gt, skeleton, width=64)
    assert flipped.coords[left_wrist].tolist() == [63 - coords[right_wrist, 0], coords[right_wrist, 1]]
    assert bool(flipped.visible[left_wrist]) and not bool(flipped.visible[right_wrist])


def test_symmetric_pose_is_flip_invariant(skeleton):
    coords = np.zeros((12, 2))
    for left, right in skeleton.flip_pairs:
        x, y = 0.1 * (left + 1), -0.05 * left
        coords[left] = [-x, y]
        coords[right] = [x, y]
    pose = npose(coords)
    assert torch.equal(flip_pose(pose, skeleton).coords, pose.coords)


def test_flip_pixel_pose_needs_width(skeleton):
    with pytest.raises(DataError):
        flip_pose(Pose.from_array(np.zeros((12, 2))), skeleton)


# ---------------------------------------------------------
# Config
# ---------------------------------------------------------
def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="learnig_rate"):
        TrainingConfig.from_dict({"learnig_rate": 0.1})


@pytest.mark.parametrize("overrides", [
    {"lambdas": [0.3, 0.5, 0.0]},
    {"lambdas": [-0.1, 0.5, 1.0]},
    {"lambdas": [1.0, 1.0]},
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"flip_prob": 1.5},
])
def test_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainingConfig.from_dict(overrides)


def test_config_round_trip():
    cfg = quick_config(image_guided=False)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.switches["image_guided"] is False and cfg.switches["cfa_enabled"] is True


# ---------------------------------------------------------
# Training loop
# ---------------------------------------------------------
def test_zero_learning_rate_step_keeps_params(skeleton, tiny_samples):
    torch.manual_seed(0)
    model = OPECNet(skeleton, SMALL_MODEL)
    # BatchNorm running statistics move in train mode; only the weights must stay
    before = {k: v.clone() for k, v in model.named_parameters()}
    trainer = Trainer(model, quick_config())
    optimizer = torch.optim.Adam(model.base_parameters(), lr=0.0)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=1)

    trainer.train_step(tiny_samples[:4], optimizer, scheduler, epoch=0, batch_id=0)
    for name, value in model.named_parameters():
        assert torch.equal(value, before[name]), name


def test_first_loss_scales_initial_term(skeleton, tiny_samples):
    cfg = quick_config(epochs=1, batch_size=1, flip_prob=0.0)
    _, trainer = train(tiny_samples[1:2], skeleton, cfg, SMALL_MODEL)
    first = trainer.history[0]
    assert first["pose1"] == first["pose2"] == first["final"] == first["init"]
    assert first["loss"] == pytest.approx(first["init"] * (1 + sum(cfg.lambdas)), rel=1e-6)


def test_training_is_deterministic(skeleton, tiny_samples):
    cfg = quick_config()
    _, first = train(tiny_samples, skeleton, cfg, SMALL_MODEL)
    _, second = train(tiny_samples, skeleton, cfg, SMALL_MODEL)
    kept = sum(s.visible_count > cfg.min_visible_joints for s in tiny_samples)
    assert len(first.history) == cfg.epochs * -(-kept // cfg.batch_size)
    assert first.history == second.history


def test_learning_rate_anneals_to_zero(skeleton, tiny_samples):
    _, trainer = train(tiny_samples, skeleton, quick_config(epochs=3), SMALL_MODEL)
    lrs = [row["lr"] for row in trainer.history]
    assert lrs[0] == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert trainer.history[-1]["step"] == len(lrs)


def test_checkpoints_and_resume(skeleton, tiny_samples, tmp_path):
    cfg = quick_config()
    store = RunStore(tmp_path / "full")
    _, full = train(tiny_samples, skeleton, cfg, SMALL_MODEL, store)
    assert [p.rsplit("/", 1)[-1] for p in full.checkpoints] == ["base_epoch_001.pt", "base_epoch_002.pt"]

    resumed_store = RunStore(tmp_path / "resumed")
    _, resumed = train(tiny_samples, skeleton, cfg, SMALL_MODEL, resumed_store,
                       resume_from=full.checkpoints[0])
    assert len(resumed.history) == len(full.history)
    for a, b in zip(full.history, resumed.history):
        assert a["step"] == b["step"]
        assert a["loss"] == pytest.approx(b["loss"], abs=1e-9)


def test_couple_phase_resume_continues_after_its_epoch(skeleton, tiny_samples, tmp_path):
    # every proposal qualifies so both couple epochs run
    cfg = quick_config(epochs=1, couple_epochs=2, couple_graph_enabled=True,
                       min_visible_joints=0, min_proposal_oks=-1.0)
    _, full = train(tiny_samples, skeleton, cfg, SMALL_MODEL, RunStore(tmp_path / "full"))
    names = [p.rsplit("/", 1)[-1] for p in full.checkpoints]
    assert names == ["base_epoch_001.pt", "couple_epoch_002.pt", "couple_epoch_003.pt"]

    def rows(history):
        return [(r["step"], r["epoch"]) for r in history]

    for i, checkpoint in enumerate(full.checkpoints[1:]):
        _, resumed = train(tiny_samples, skeleton, cfg, SMALL_MODEL, RunStore(tmp_path / f"resumed_{i}"),
                           resume_from=checkpoint)
        assert len(resumed.checkpoints) == 1 - i
        assert rows(resumed.history) == rows(full.history)
        assert len({r["step"] for r in resumed.history}) == len(resumed.history)
        for a, b in zip(full.history, resumed.history):
            assert a["loss"] == pytest.approx(b["loss"], abs=1e-9)


def test_training_needs_visible_samples(skeleton, tiny_samples):
    hidden = [replace(s, gt=replace(s.gt, visible=torch.zeros_like(s.gt.visible))) for s in tiny_samples]
    with pytest.raises(DataError):
        train(hidden, skeleton, quick_config(), SMALL_MODEL)


def test_non_finite_loss_reports_batch(skeleton, tiny_samples):
    broken = list(tiny_samples)
    # instance 1 is a front figure, always fully visible
    coords = broken[1].gt.coords.clone()
    coords[3] = float("nan")
    broken[1] = replace(broken[1], gt=broken[1].gt.with_coords(coords))
    with pytest.raises(NumericError) as info:
        train(broken, skeleton, quick_config(batch_size=len(broken)), SMALL_MODEL)
    assert info.value.batch_id == 0
    assert info.value.exit_code == 4


def test_non_finite_check_names_joint(skeleton):
    trainer = Trainer(OPECNet(skeleton, SMALL_MODEL), quick_config())
    final = torch.zeros(2, 12, 2, requires_grad=True)
    final.grad = torch.full((2, 12, 2), 0.1)
    final.grad[1, 7, 0] = float("nan")
    with pytest.raises(NumericError) as info:
        trainer._check_finite(torch.tensor(float("nan")), final, batch_id=5)
    assert (info.value.batch_id, info.value.joint) == (5, 7)


# ---------------------------------------------------------
# CoupleGraph phase
# ---------------------------------------------------------
def test_pair_samples_uses_annotated_partners(tiny_samples):
    pairs = pair_samples(tiny_samples)
    assert pairs == [(0, 1), (2, 3), (4, 5), (6, 7)]


def test_pair_samples_falls_back_to_box_overlap(tiny_samples):
    a, b = (replace(s, partner=None) for s in tiny_samples[:2])
    overlapping = [replace(a, box=BoundingBox(0, 0, 10, 10)), replace(b, box=BoundingBox(5, 0, 15, 10))]
    apart = [replace(a, box=BoundingBox(0, 0, 10, 10)), replace(b, box=BoundingBox(20, 0, 30, 10))]
    assert pair_samples(overlapping) == [(0, 1)]
    assert pair_samples(apart) == []


def test_couple_step_trains_only_the_refiner(skeleton, tiny_samples):
    torch.manual_seed(0)
    model = OPECNet(skeleton, SMALL_MODEL, couple_graph=True)
    base_before = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("couple.")}
    head_before = model.couple.head.weight.clone()

    trainer = Trainer(model, quick_config())
    for p in model.base_parameters():
        p.requires_grad_(False)
    optimizer, scheduler = trainer._build_optimizer(model.couple.parameters(), 4)
    loss = trainer.couple_step(tiny_samples, [(0, 1), (2, 3)], optimizer, scheduler, epoch=0, batch_id=0)

    assert np.isfinite(loss)
    assert not torch.equal(model.couple.head.weight, head_before)
    for name, value in model.state_dict().items():
        if name in base_before:
            assert torch.equal(value, base_before[name]), name
    assert trainer.history[-1]["init"] == 0.0


def test_couple_phase_without_good_proposals_is_skipped(skeleton, tiny_samples):
    torch.manual_seed(0)
    model = OPECNet(skeleton, SMALL_MODEL)
    trainer = Trainer(model, quick_config(min_proposal_oks=1.0))
    history = trainer.train_couple(tiny_samples, epochs=1)
    assert history == []
    assert model.couple is not None
    assert all(not p.requires_grad for p in model.base_parameters())


# ---------------------------------------------------------
# Acceptance runs (OPEC_RUN_SLOW=1)
# ---------------------------------------------------------
def synthetic_split(num_train, num_test, size):
    from dataset import SynthConfig, build_instance_samples, split_records, synth_generate

    total = num_train + num_test
    records = synth_generate(SynthConfig.from_dict({"num_images": total, "seed": 11}))
    train_records, test_records = split_records(records, holdout=num_test / total, seed=11)
    return (build_instance_samples(train_records, size=size),
            build_instance_samples(test_records, size=size))


def joint_errors(model, samples):
    model.eval()
    with torch.no_grad():
        out = model(torch.stack([s.pixels for s in samples]))
    gts = [s.gt for s in samples]
    initial = mean_joint_error([out.initial_pose.select(i) for i in range(len(samples))], gts)
    final = mean_joint_error([out.trace.final.select(i) for i in range(len(samples))], gts)
    return initial, final


@pytest.mark.slow
def test_overfit_eight_images(skeleton):
    samples, _ = synthetic_split(8, 0, (64, 64))
    cfg = quick_config(epochs=250, batch_size=8, flip_prob=0.0)
    _, trainer = train(samples, skeleton, cfg)
    assert len(trainer.history) <= 500
    assert trainer.history[-1]["loss"] < 0.05 * trainer.history[0]["loss"]


@pytest.mark.slow
def test_correction_recovers_occluded_joints(skeleton):
    train_set, test_set = synthetic_split(400, 100, (64, 64))
    model, _ = train(train_set, skeleton, quick_config(epochs=30, batch_size=8))
    initial, final = joint_errors(model, test_set)
    assert final["invisible"] <= 0.8 * initial["invisible"]
    assert final["visible"] <= 1.05 * initial["visible"]


@pytest.mark.slow
def test_image_guidance_helps_occluded_joints(skeleton):
    train_set, test_set = synthetic_split(400, 100, (64, 64))
    full, _ = train(train_set, skeleton, quick_config(epochs=30, batch_size=8))
    blind, _ = train(train_set, skeleton, quick_config(epochs=30, batch_size=8, image_guided=False))
    full_initial, full_final = joint_errors(full, test_set)
    _, blind_final = joint_errors(blind, test_set)
    assert full_final["invisible"] <= 1.02 * blind_final["invisible"]
    assert full_final["invisible"] < full_initial["invisible"]
