import pytest
import torch
from torch.func import functional_call

from backbone import (Backbone, FeaturePyramid, HeatmapHead, ImageCrop, backbone_forward, check_pyramid,
                      hard_argmax, heatmap_to_normalized, soft_argmax)
from errors import DataError, ShapeError
from gradients import all_passed, finite_difference_probe, max_relative_error
from poses import NORMALIZED, PIXEL, BoundingBox


def probe_parameter(module, name, inputs, reduce, gen):
    """Finite-difference check of d reduce(module(inputs)) / d parameter"""
    module = module.double()
    params = dict(module.named_parameters())

    def fn(weight):
        return reduce(functional_call(module, {**params, name: weight}, inputs))

    return finite_difference_probe(fn, [params[name].detach()], num_probes=10, generator=gen)


# ---------------------------------------------------------
# Backbone
# ---------------------------------------------------------
def test_default_pyramid_shapes():
    torch.manual_seed(0)
    pyramid = Backbone()(torch.rand(2, 3, 64, 64))
    assert tuple(pyramid.F1.shape) == (2, 64, 8, 8)
    assert tuple(pyramid.F2.shape) == (2, 32, 16, 16)
    assert tuple(pyramid.F3.shape) == (2, 32, 32, 32)


def test_small_pyramid_shapes(small_cfg):
    backbone = Backbone(small_cfg)
    pyramid = backbone(torch.rand(3, 32, 32))
    assert backbone.pyramid_channels == (8, 8, 8)
    assert [tuple(level.shape[-2:]) for level in pyramid] == [(4, 4), (8, 8), (16, 16)]


def test_zero_input_is_finite(small_cfg):
    pyramid = Backbone(small_cfg)(torch.zeros(1, 3, 32, 32))
    assert all(bool(torch.isfinite(level).all()) for level in pyramid)


def test_backbone_is_deterministic(small_cfg):
    torch.manual_seed(0)
    backbone = Backbone(small_cfg)
    crops = torch.rand(2, 3, 32, 32)
    first, second = backbone(crops), backbone(crops)
    assert all(torch.equal(a, b) for a, b in zip(first, second))


def test_conv_units_carry_batch_norm(small_cfg):
    backbone = Backbone(small_cfg)
    units = list(backbone.encoder) + [backbone.context] + list(backbone.decoder)
    assert all(isinstance(unit.bn, torch.nn.BatchNorm2d) for unit in units)
    assert all(unit.conv.bias is None for unit in units)
    assert backbone.pyramid_channels == (units[len(backbone.encoder) - 1].out_channels,
                                         backbone.decoder[0].out_channels, backbone.decoder[1].out_channels)


def test_backbone_rejects_wrong_crop(small_cfg):
    with pytest.raises(ShapeError):
        Backbone(small_cfg)(torch.rand(1, 3, 40, 32))
    with pytest.raises(ShapeError):
        Backbone(small_cfg)(torch.rand(1, 1, 32, 32))


def test_backbone_forward_accepts_image_crop(small_cfg):
    crop = ImageCrop(torch.rand(3, 32, 32), BoundingBox(0, 0, 10, 10), 7)
    pyramid = backbone_forward(crop, Backbone(small_cfg))
    assert pyramid.F3.shape[0] == 1


def test_image_crop_rejects_non_finite():
    pixels = torch.zeros(3, 4, 4)
    pixels[0, 1, 1] = float("nan")
    with pytest.raises(DataError):
        ImageCrop(pixels, BoundingBox(0, 0, 4, 4))


def test_check_pyramid_order():
    small, big = torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 8, 8)
    with pytest.raises(ShapeError):
        check_pyramid(FeaturePyramid(big, small, big))


def test_backbone_weight_gradients(small_cfg, gen):
    torch.manual_seed(1)
    backbone = Backbone(small_cfg)
    crops = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
    probes = probe_parameter(backbone, "encoder.0.conv.weight", (crops,), lambda p: p.F3.sum(), gen)
    assert all_passed(probes), max_relative_error(probes)


# ---------------------------------------------------------
# Heatmap head
# ---------------------------------------------------------
def test_heatmap_head_shape():
    head = HeatmapHead(32, 12)
    assert tuple(head(torch.rand(1, 32, 32, 32)).shape) == (1, 12, 32, 32)


def test_heatmap_head_channel_mismatch():
    with pytest.raises(ShapeError):
        HeatmapHead(32, 12)(torch.rand(1, 16, 32, 32))


def test_heatmap_head_is_linear():
    head = HeatmapHead(8, 4).double()
    torch.nn.init.zeros_(head.conv.bias)
    x = torch.rand(1, 8, 6, 6, dtype=torch.float64)
    torch.testing.assert_close(head(2 * x), 2 * head(x))


def test_heatmap_head_gradients(gen):
    head = HeatmapHead(8, 4, kernel_size=3)
    x = torch.rand(1, 8, 6, 6, generator=gen, dtype=torch.float64)
    probes = probe_parameter(head, "conv.weight", (x,), lambda h: (h ** 2).sum(), gen)
    assert all_passed(probes)


# ---------------------------------------------------------
# Heatmap -> coordinates
# ---------------------------------------------------------
def test_soft_argmax_uniform_map():
    pose = soft_argmax(torch.zeros(1, 8, 8, dtype=torch.float64))
    assert pose.frame == PIXEL
    torch.testing.assert_close(pose.coords[0], torch.tensor([3.5, 3.5], dtype=torch.float64))
    torch.testing.assert_close(pose.confidence[0], torch.tensor(1 / 64, dtype=torch.float64))


def test_soft_argmax_single_peak():
    h = torch.full((1, 8, 8), -50.0, dtype=torch.float64)
    h[0, 3, 5] = 50.0
    pose = soft_argmax(h)
    assert abs(pose.coords[0, 0].item() - 5) < 1e-3
    assert abs(pose.coords[0, 1].item() - 3) < 1e-3
    assert abs(pose.confidence[0].item() - 1) < 1e-6


def test_soft_argmax_symmetric_peaks():
    h = torch.full((1, 8, 8), -50.0, dtype=torch.float64)
    h[0, 2, 2] = h[0, 2, 6] = 50.0
    pose = soft_argmax(h)
    assert pose.coords[0].tolist() == [4.0, 2.0]


def test_soft_argmax_stays_in_grid(gen):
    h = torch.randn(4, 12, 16, 10, generator=gen) * 10
    coords = soft_argmax(h).coords
    assert bool((coords[..., 0] >= 0).all()) and bool((coords[..., 0] <= 9).all())
    assert bool((coords[..., 1] >= 0).all()) and bool((coords[..., 1] <= 15).all())


def test_soft_argmax_shift_invariant(gen):
    h = torch.randn(3, 8, 8, generator=gen, dtype=torch.float64)
    shifted = h + torch.tensor([7.0, -3.0, 0.5], dtype=torch.float64).view(3, 1, 1)
    torch.testing.assert_close(soft_argmax(shifted).coords, soft_argmax(h).coords)


def test_soft_argmax_gradients(gen):
    h = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    probes = finite_difference_probe(lambda x: (soft_argmax(x).coords ** 2).sum(), [h],
                                     num_probes=10, generator=gen)
    assert all_passed(probes)


def test_hard_argmax_peak_and_tie():
    h = torch.zeros(2, 8, 8)
    h[0, 3, 5] = 1.0
    pose = hard_argmax(h)
    assert pose.coords.tolist() == [[5.0, 3.0], [0.0, 0.0]]


def test_hard_and_soft_agree_on_dominant_peak(gen):
    for _ in range(20):
        h = torch.rand(1, 16, 16, generator=gen, dtype=torch.float64)
        y, x = torch.randint(16, (2,), generator=gen).tolist()
        h[0, y, x] = h.max() + 20.0
        hard, soft = hard_argmax(h), soft_argmax(h)
        assert (hard.coords - soft.coords).abs().max().item() < 0.5
        assert hard.coords[0].tolist() == [float(x), float(y)]


def test_softmax_beta_sharpens_towards_the_peak(gen):
    h = torch.rand(1, 16, 16, generator=gen, dtype=torch.float64)
    h[0, 4, 11] = h.max() + 1.0
    hard = hard_argmax(h).coords
    errors = [(soft_argmax(h, beta).coords - hard).abs().max().item() for beta in (1.0, 4.0, 64.0)]
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 1e-6
    assert soft_argmax(h, 4.0).confidence.item() > soft_argmax(h).confidence.item()


def test_heatmap_to_normalized_centre():
    pose = soft_argmax(torch.zeros(2, 16, 16, dtype=torch.float64))
    normalized = heatmap_to_normalized(pose, (16, 16))
    assert normalized.frame == NORMALIZED
    torch.testing.assert_close(normalized.coords, torch.zeros(2, 2, dtype=torch.float64))
