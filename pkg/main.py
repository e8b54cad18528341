"""
Main Orchestrator: Coordinates training, evaluation, dataset statistics,
synthetic data generation and overlay rendering
"""
import argparse
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from colorama import Fore, Style, init
from tabulate import tabulate

from config import ABLATIONS, EVAL_CONFIG, MODEL_CONFIG, SYSTEM_SETTINGS
from dataset import SynthConfig, build_instance_samples, load_dataset, synth_generate, write_synthetic_dataset
from errors import ConfigError, OPECError
from evaluation import (PosePrediction, PoseTarget, compute_map, format_ap_table, format_inv_vis_table,
                        format_occlusion_row, inv_vis_breakdown, mean_joint_error, occlusion_stats)
from network import OPECNet
from poses import Pose
from render import legend, render_overlay, save_overlay
from skeleton import SkeletonSpec, crop_extent, denormalize_pose, load_skeleton
from store import RunManifest, RunStore, load_checkpoint, restore_model
from training import TrainingConfig, pair_samples, seed_everything, train

# Setup logging
logging.basicConfig(
    level=getattr(logging, SYSTEM_SETTINGS["log_level"]),
    format='%(asctime)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)
init(autoreset=True)

CONFIG_SECTIONS = ("model", "training", "synth", "eval")


class MetricsTracker:
    """Wall-clock timings per pipeline stage"""

    def __init__(self):
        self.start_time = None
        self.timings: Dict[str, float] = {}

    def start(self):
        self.start_time = time.time()
        self.timings = {}

    @contextmanager
    def stage(self, name: str):
        began = time.time()
        try:
            yield
        finally:
            self.timings[name] = round(time.time() - began, 3)

    def get_duration(self) -> float:
        if self.start_time:
            return round(time.time() - self.start_time, 2)
        return 0.0

    def report(self):
        rows = [[name, f"{seconds:.2f}s"] for name, seconds in self.timings.items()]
        rows.append(["total", f"{self.get_duration():.2f}s"])
        print("\n" + "=" * 60)
        print("📊 PIPELINE TIMINGS")
        print("=" * 60)
        print(tabulate(rows, headers=["Stage", "Duration"], tablefmt="simple"))
        print("=" * 60 + "\n")


def load_run_config(path: Optional[str]) -> Dict[str, dict]:
    """JSON document with optional sections model / training / synth / eval"""
    sections = {name: {} for name in CONFIG_SECTIONS}
    if not path:
        return sections
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"Config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e

    for key, value in doc.items():
        if key not in sections:
            raise ConfigError(f"Unknown config section '{key}'")
        if not isinstance(value, dict):
            raise ConfigError(f"Config section '{key}' must be an object")
        sections[key] = value
    return sections


def merge_section(defaults: dict, overrides: dict, section: str) -> dict:
    merged = dict(defaults)
    for key, value in overrides.items():
        if key not in defaults:
            raise ConfigError(f"Unknown {section} config key '{key}'")
        merged[key] = value
    return merged


def ablation_overrides(names: Sequence[str]) -> Dict[str, bool]:
    overrides = {}
    for name in names or []:
        if name not in ABLATIONS:
            raise ConfigError(f"Unknown ablation '{name}' (choose from {', '.join(ABLATIONS)})")
        overrides[ABLATIONS[name]] = False
    return overrides


def model_from_checkpoint(state: dict, ablations: Sequence[str] = (), couple_graph: bool = False) -> OPECNet:
    skeleton = SkeletonSpec.from_dict(state["skeleton"]) if state.get("skeleton") else load_skeleton()
    cfg = TrainingConfig.from_dict({**state.get("config", {}), **ablation_overrides(ablations)})
    model = OPECNet(skeleton, state.get("model_config") or MODEL_CONFIG, switches=cfg.switches)
    restore_model(state, model)
    if couple_graph and model.couple is None:
        logger.warning("⚠️ Checkpoint has no CoupleGraph weights: refiner starts at the identity")
        model.enable_couple_graph()
    model.eval()
    return model


class PosePipeline:
    """Main pipeline orchestrator"""

    def __init__(self, out_dir: Optional[str] = None):
        self.store = RunStore(out_dir) if out_dir else None
        self.metrics = MetricsTracker()

    def _require_store(self) -> RunStore:
        if self.store is None:
            raise ConfigError("This command needs --out")
        return self.store

    # -- train -----------------------------------------------------------
    def train(self, dataset: str, config_path: Optional[str] = None, seed: Optional[int] = None,
              couple_graph: bool = False, ablations: Sequence[str] = (), epochs: Optional[int] = None,
              resume: Optional[str] = None) -> RunManifest:
        store = self._require_store()
        self.metrics.start()
        sections = load_run_config(config_path)

        overrides = dict(sections["training"])
        if seed is not None:
            overrides["seed"] = seed
        if epochs is not None:
            overrides["epochs"] = epochs
        if couple_graph:
            overrides["couple_graph_enabled"] = True
        overrides.update(ablation_overrides(ablations))
        cfg = TrainingConfig.from_dict(overrides)
        model_cfg = merge_section(MODEL_CONFIG, sections["model"], "model")

        print(f"\n{Fore.CYAN}🚀 TRAINING ({cfg.epochs} epochs, seed {cfg.seed}){Style.RESET_ALL}\n")
        skeleton = load_skeleton()
        with self.metrics.stage("load"):
            records, root = load_dataset(dataset, skeleton.num_joints)
            samples = build_instance_samples(records, root, model_cfg["crop_size"])

        with self.metrics.stage("train"):
            model, trainer = train(samples, skeleton, cfg, model_cfg, store, resume_from=resume)

        loss_log = store.write_loss_log(trainer.history)
        config_file = store.write_json("config.json", {"model": model_cfg, "training": cfg.to_dict()})
        manifest = RunManifest(
            command="train",
            config={"model": model_cfg, "training": cfg.to_dict(), "dataset": str(dataset)},
            seed=cfg.seed,
            checkpoints=list(trainer.checkpoints),
            outputs={"loss_log": str(loss_log), "config": str(config_file)},
            timings=dict(self.metrics.timings),
        )
        store.write_manifest(manifest)
        self.metrics.report()
        return manifest

    # -- eval ------------------------------------------------------------
    def predict(self, model: OPECNet, samples, batch_size: int = 16, couple_graph: bool = False):
        """
        Returns:
            (initial, final) normalized poses, each batched over all samples
        """
        initial, final, fine = [], [], []
        with torch.no_grad():
            for start in range(0, len(samples), batch_size):
                crops = torch.stack([s.pixels for s in samples[start:start + batch_size]])
                out = model(crops)
                initial.append(out.initial_pose)
                final.append(out.trace.final)
                if couple_graph:
                    fine.append(out.adapted.F3)

            init_pose = Pose(torch.cat([p.coords for p in initial]),
                             torch.cat([p.confidence for p in initial]), initial[0].frame)
            final_pose = Pose(torch.cat([p.coords for p in final]),
                              torch.cat([p.confidence for p in final]), final[0].frame)

            pairs = pair_samples(samples) if couple_graph else []
            if pairs:
                a_idx = [a for a, _ in pairs]
                b_idx = [b for _, b in pairs]
                ref_a, ref_b = model.refine_pair(final_pose, torch.cat(fine), a_idx, b_idx,
                                                 [samples[i].box for i in a_idx],
                                                 [samples[i].box for i in b_idx])
                coords = final_pose.coords.clone()
                coords[a_idx], coords[b_idx] = ref_a.coords, ref_b.coords
                final_pose = final_pose.with_coords(coords)
        return init_pose, final_pose

    @staticmethod
    def to_source_pixels(pose: Pose, sample) -> Pose:
        h, w = sample.pixels.shape[-2:]
        in_crop = denormalize_pose(pose, crop_extent(w, h))
        return in_crop.with_coords(sample.transform.invert(in_crop.coords.double()))

    def _source_targets(self, records) -> Dict:
        return {(r.image_id, k): PoseTarget(r.image_id, inst.gt, inst.box, inst.instance_id)
                for r in records for k, inst in enumerate(r.instances)}

    def evaluate(self, checkpoint: str, dataset: str, couple_graph: bool = False,
                 ablations: Sequence[str] = (), config_path: Optional[str] = None) -> Dict:
        self.metrics.start()
        eval_cfg = merge_section(EVAL_CONFIG, load_run_config(config_path)["eval"], "eval")
        state = load_checkpoint(checkpoint)
        model = model_from_checkpoint(state, ablations, couple_graph)
        skeleton = model.skeleton

        with self.metrics.stage("load"):
            records, root = load_dataset(dataset, skeleton.num_joints)
            samples = build_instance_samples(records, root, model.cfg["crop_size"])
        targets_by_key = self._source_targets(records)
        targets = list(targets_by_key.values())
        sample_targets = [targets_by_key[(s.image_id, s.instance_index)] for s in samples]

        with self.metrics.stage("predict"):
            poses = dict(zip(("initial", "final"),
                             self.predict(model, samples, couple_graph=couple_graph) if samples
                             else (None, None)))

        results = {}
        with self.metrics.stage("metrics"):
            for name, batched in poses.items():
                per_sample = [batched.select(i) for i in range(len(samples))] if samples else []
                preds = [PosePrediction(s.image_id, self.to_source_pixels(p, s),
                                        float(p.confidence.mean()), s.box)
                         for p, s in zip(per_sample, samples)]
                ap = compute_map(preds, targets, skeleton.oks_sigmas, eval_cfg["report_thresholds"],
                                 eval_cfg["target_filter"])
                inv_vis = inv_vis_breakdown([p.pose for p in preds], sample_targets, skeleton.oks_sigmas,
                                            eval_cfg["inv_vis_levels"])
                errors = mean_joint_error(per_sample, [s.gt for s in samples])
                results[name] = {"ap": ap, "inv_vis": inv_vis, "joint_error": errors}

        label = "OPEC-Net" + (" + CoupleGraph" if couple_graph else "")
        ap_table = format_ap_table({"Initial Pose": results["initial"]["ap"],
                                    label: results["final"]["ap"]})
        inv_table = format_inv_vis_table({"Initial Pose": results["initial"]["inv_vis"],
                                          label: results["final"]["inv_vis"]})
        print(f"\n{Fore.CYAN}📈 Evaluation on {len(samples)} instances{Style.RESET_ALL}")
        print(ap_table + "\n")
        print(inv_table + "\n")

        if self.store:
            report = {name: {"ap": r["ap"].to_dict(), "inv_vis": r["inv_vis"].to_dict(),
                             "joint_error": r["joint_error"]}
                      for name, r in results.items()}
            report_file = self.store.write_json("eval_report.json", report)
            summary_file = self.store.write_text("eval_summary.txt", ap_table + "\n\n" + inv_table)
            self.store.write_manifest(RunManifest(
                command="eval",
                config={"checkpoint": str(checkpoint), "dataset": str(dataset),
                        "couple_graph": couple_graph, "ablations": list(ablations), "eval": eval_cfg},
                seed=state.get("config", {}).get("seed"),
                checkpoints=[str(checkpoint)],
                outputs={"report": str(report_file), "summary": str(summary_file)},
                timings=dict(self.metrics.timings),
            ))
        return results

    # -- stats -----------------------------------------------------------
    def stats(self, dataset: str, name: Optional[str] = None):
        records, _ = load_dataset(dataset)
        result = occlusion_stats(records)
        print(format_occlusion_row(name or Path(dataset).stem, result))
        if self.store:
            path = self.store.write_json("occlusion_stats.json", result.to_dict())
            self.store.write_manifest(RunManifest("stats", {"dataset": str(dataset)},
                                                  outputs={"stats": str(path)}))
        return result

    # -- synth -----------------------------------------------------------
    def synth(self, num_images: Optional[int] = None, occlusion: Optional[float] = None,
              seed: Optional[int] = None, config_path: Optional[str] = None) -> RunManifest:
        store = self._require_store()
        self.metrics.start()
        overrides = dict(load_run_config(config_path)["synth"])
        for key, value in (("num_images", num_images), ("occlusion_rate", occlusion), ("seed", seed)):
            if value is not None:
                overrides[key] = value
        cfg = SynthConfig.from_dict(overrides)

        with self.metrics.stage("generate"):
            records = synth_generate(cfg)
        with self.metrics.stage("write"):
            path = write_synthetic_dataset(records, store.out_dir)

        manifest = RunManifest("synth", {"synth": dict(vars(cfg))}, seed=cfg.seed,
                               outputs={"annotations": str(path)}, timings=dict(self.metrics.timings))
        store.write_manifest(manifest)
        print(f"{Fore.GREEN}✅ Wrote {len(records)} synthetic images to {store.out_dir}{Style.RESET_ALL}")
        return manifest

    # -- render ----------------------------------------------------------
    def render(self, checkpoint: str, dataset: str, couple_graph: bool = False) -> List[Path]:
        store = self._require_store()
        model = model_from_checkpoint(load_checkpoint(checkpoint), couple_graph=couple_graph)
        records, root = load_dataset(dataset, model.skeleton.num_joints)
        samples = build_instance_samples(records, root, model.cfg["crop_size"])
        if not samples:
            logger.info("💤 Nothing to render")
            return []

        initial, final = self.predict(model, samples, couple_graph=couple_graph)
        by_image: Dict[int, list] = {}
        for i, s in enumerate(samples):
            by_image.setdefault(s.image_id, []).append(i)

        render_dir = store.out_dir / "render"
        render_dir.mkdir(exist_ok=True)
        written = []
        for record in records:
            idxs = by_image.get(record.image_id, [])
            if not idxs:
                continue
            layers = {
                "ground_truth": [record.instances[samples[i].instance_index].gt.coords.numpy()
                                 for i in idxs],
                "initial": [self.to_source_pixels(initial.select(i), samples[i]).coords.numpy()
                            for i in idxs],
                "final": [self.to_source_pixels(final.select(i), samples[i]).coords.numpy()
                          for i in idxs],
            }
            invisible = [record.instances[samples[i].instance_index].gt.invisible.numpy() for i in idxs]
            canvas = render_overlay(record.image_tensor(root), model.skeleton, layers, invisible)
            written.append(save_overlay(canvas, render_dir / f"{record.image_id:06d}.png"))

        store.write_json("legend.json", {k: list(v) for k, v in legend().items()})
        logger.info(f"✅ Rendered {len(written)} overlays")
        return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Occluded pose estimation - two-stage pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset=True, out=True, config=True):
        if dataset:
            p.add_argument("--dataset", required=True, help="Annotation JSON or its directory")
        if out:
            p.add_argument("--out", required=True, help="Output directory")
        if config:
            p.add_argument("--config", help="JSON config file (sections: model, training, synth, eval)")

    p = sub.add_parser("train", help="Train the network")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--couple-graph", action="store_true")
    p.add_argument("--ablation", action="append", choices=list(ABLATIONS), default=[])

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--couple-graph", action="store_true")
    p.add_argument("--ablation", action="append", choices=list(ABLATIONS), default=[])

    p = sub.add_parser("stats", help="Occlusion statistics of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")

    p = sub.add_parser("synth", help="Generate a synthetic occluded-couple dataset")
    common(p, dataset=False)
    p.add_argument("--num-images", type=int)
    p.add_argument("--occlusion", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("render", help="Draw pose overlays")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--couple-graph", action="store_true")

    sub.add_parser("verify", help="Check the environment and model invariants")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI entry point"""
    args = build_parser().parse_args(argv)

    try:
        if args.command == "verify":
            from verify_system import run_checks
            return 0 if run_checks() else 1

        seed_everything(getattr(args, "seed", None) or 0)
        pipeline = PosePipeline(getattr(args, "out", None))
        if args.command == "train":
            pipeline.train(args.dataset, args.config, args.seed, args.couple_graph,
                           args.ablation, args.epochs, args.resume)
        elif args.command == "eval":
            pipeline.evaluate(args.checkpoint, args.dataset, args.couple_graph, args.ablation, args.config)
        elif args.command == "stats":
            pipeline.stats(args.dataset)
        elif args.command == "synth":
            pipeline.synth(args.num_images, args.occlusion, args.seed, args.config)
        elif args.command == "render":
            pipeline.render(args.checkpoint, args.dataset, args.couple_graph)
    except OPECError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(f"{Fore.RED}❌ {e}{Style.RESET_ALL}")
        return e.exit_code

    return 0


if __name__ == "__main__":
    raise SystemExit(main())
