"""
Global Configuration: Skeleton, Model, Training, Data and Evaluation Settings
Desk-scale defaults for the two-stage occluded-pose framework
"""
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

PROJECT_ROOT = Path(__file__).resolve().parent

# ---------------------------------------------------------
# 1. SKELETON
# ---------------------------------------------------------
SKELETON_CONFIG = {
    # Bundled skeletons live next to this file
    "bundled_dir": PROJECT_ROOT / "skeletons",
    "default": "ocpose12",
}

# ---------------------------------------------------------
# 2. MODEL (backbone -> CFA -> heatmap head -> IGP-GCN)
# ---------------------------------------------------------
MODEL_CONFIG = {
    "crop_size": [64, 64],           # (height, width)
    "in_channels": 3,

    # Encoder: three stride-2 stages, 64x64 -> 8x8; last one is F1
    "encoder_channels": [16, 32, 64],
    # Decoder: two upsample+conv stages producing F2 and F3
    "decoder_channels": [32, 32],

    # Heatmap equals F3's spatial size
    "heatmap_size": [32, 32],
    "heatmap_kernel": 1,
    # Scores are multiplied by this before the soft-argmax softmax
    "softmax_beta": 4.0,

    # IGP-GCN channel plan
    "embed_channels": 128,
    "block_channels": 256,
    "attention_heads": 1,

    # CoupleGraph refiner
    "couple_embed_channels": 128,
    "couple_block_channels": 256,
}

# Ablation switches, keyed by the CLI name (--ablation <name>)
ABLATIONS = {
    "image_guided": "image_guided",
    "progressive": "progressive",
    "multi_scale": "multi_scale_features",
    "cfa": "cfa_enabled",
    "fusion": "fusion_enabled",
}

# ---------------------------------------------------------
# 3. TRAINING
# ---------------------------------------------------------
TRAINING_CONFIG = {
    "lambdas": [0.3, 0.5, 1.0],
    "learning_rate": 1e-3,
    "epochs": 30,
    "batch_size": 8,
    "seed": 0,
    "couple_graph_enabled": False,
    "couple_epochs": 10,

    # Augmentation and proposal rules
    "flip_prob": 0.5,
    "min_visible_joints": 5,
    "min_proposal_oks": 0.3,

    # Ablation switches (all on = full model)
    "image_guided": True,
    "progressive": True,
    "multi_scale_features": True,
    "cfa_enabled": True,
    "fusion_enabled": True,

    # Persistence
    "checkpoint_every_epoch": True,
}

# ---------------------------------------------------------
# 4. DATA
# ---------------------------------------------------------
DATA_CONFIG = {
    "box_margin": 0.15,
    "joint_margin": 8.0,             # pixels a labeled joint may sit outside the image
    "annotation_file": "annotations.json",
    "holdout_fraction": 0.2,
}

SYNTH_CONFIG = {
    "num_images": 64,
    "image_size": [96, 96],          # (height, width)
    "limb_length_range": [8.0, 16.0],
    "limb_thickness_range": [2, 3],
    # Limbs bend around the skeleton rest pose by at most this much; the whole
    # figure is rotated by at most rotation_deg
    "limb_jitter_deg": 30.0,
    "rotation_deg": 30.0,
    "joint_radius": 2,
    "occlusion_rate": 0.3,
    "noise_std": 0.02,
    "box_padding": 4.0,
    "max_retries": 200,
    "seed": 0,
}

# ---------------------------------------------------------
# 5. EVALUATION
# ---------------------------------------------------------
EVAL_CONFIG = {
    "report_thresholds": [0.50, 0.75, 0.80, 0.90],
    "inv_vis_levels": [0.75, 0.90],
    "occlusion_thresholds": [0.3, 0.5, 0.75],
    # Drop predictions whose box does not touch any target box
    "target_filter": True,
}

# ---------------------------------------------------------
# 6. RENDERING
# ---------------------------------------------------------
RENDER_CONFIG = {
    "scale": 4,
    "marker_radius": 2,
    "colors": {
        "ground_truth": (0, 200, 0),
        "initial": (220, 40, 40),
        "final": (40, 90, 255),
    },
}

# ---------------------------------------------------------
# 7. SYSTEM SETTINGS
# ---------------------------------------------------------
SYSTEM_SETTINGS = {
    "log_level": os.environ.get("OPEC_LOG_LEVEL", "INFO"),
    "num_threads": int(os.environ.get("OPEC_NUM_THREADS", "1")),
    "deterministic": os.environ.get("OPEC_DETERMINISTIC", "1") != "0",
    "checkpoint_version": 1,
}
