import os

import pytest
import torch

from skeleton import load_skeleton

# A tiny network: 32x32 crops, 16x16 heatmaps
SMALL_MODEL = {
    "crop_size": [32, 32],
    "in_channels": 3,
    "encoder_channels": [4, 8, 8],
    "decoder_channels": [8, 8],
    "heatmap_size": [16, 16],
    "heatmap_kernel": 1,
    "softmax_beta": 4.0,
    "embed_channels": 16,
    "block_channels": 32,
    "attention_heads": 1,
    "couple_embed_channels": 16,
    "couple_block_channels": 32,
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs, enabled with OPEC_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("OPEC_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set OPEC_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def skeleton():
    return load_skeleton("ocpose12")


@pytest.fixture
def small_cfg():
    return dict(SMALL_MODEL)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


# Four 48x48 couple images; tiny limbs keep the figures inside the frame
TINY_SYNTH = {
    "num_images": 4,
    "image_size": [48, 48],
    "limb_length_range": [4.0, 8.0],
    "seed": 7,
}


@pytest.fixture(scope="session")
def tiny_records():
    from dataset import SynthConfig, synth_generate

    return synth_generate(SynthConfig.from_dict(TINY_SYNTH), load_skeleton("ocpose12"))


@pytest.fixture
def tiny_samples(tiny_records):
    from dataset import build_instance_samples

    return build_instance_samples(tiny_records, size=SMALL_MODEL["crop_size"])
