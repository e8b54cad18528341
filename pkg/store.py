"""
Run Store: checkpoints, loss logs, reports and run manifests under one output directory
Handles: Versioned checkpoints, Shape validation on load, Manifest bookkeeping
"""
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch

from config import SYSTEM_SETTINGS
from errors import CheckpointError, DataError

logger = logging.getLogger(__name__)

LOSS_LOG = "loss.csv"
LOSS_COLUMNS = ("step", "epoch", "lr", "loss", "init", "pose1", "pose2", "final")
MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int] = None
    checkpoints: List[str] = field(default_factory=list)
    outputs: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def missing_files(self) -> List[str]:
        paths = list(self.checkpoints) + list(self.outputs.values())
        return [p for p in paths if not Path(p).exists()]

    def to_dict(self) -> dict:
        return asdict(self)


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"Cannot serialize {type(obj).__name__}")


def load_checkpoint(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} not found")
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Checkpoint {path} could not be read: {e}") from e

    version = state.get("format_version") if isinstance(state, dict) else None
    if version != SYSTEM_SETTINGS["checkpoint_version"]:
        raise CheckpointError(f"Checkpoint {path} has unsupported format version {version!r}")
    return state


def restore_model(state: dict, model):
    """Load model weights after checking every tensor shape; names the first offending layer"""
    weights = state["model"]
    if any(k.startswith("couple.") for k in weights) and getattr(model, "couple", True) is None:
        model.enable_couple_graph()

    current = model.state_dict()
    for name, tensor in weights.items():
        if name not in current:
            raise CheckpointError(f"Checkpoint layer '{name}' does not exist in this model")
        if tuple(current[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"Shape mismatch in layer '{name}': checkpoint {tuple(tensor.shape)}, "
                f"model {tuple(current[name].shape)}"
            )
    missing = [name for name in current if name not in weights]
    if missing:
        raise CheckpointError(f"Checkpoint is missing layer '{missing[0]}'")

    model.load_state_dict(weights)
    return model


class RunStore:
    """Owns every file a command writes; nothing goes outside out_dir"""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.checkpoint_dir = self.out_dir / "checkpoints"
        self._ensure_dirs()

    def _ensure_dirs(self):
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"Cannot create output directory {self.out_dir}: {e}") from e

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def _write(self, name: str, text: str) -> Path:
        path = self.path(name)
        try:
            with open(path, "w", newline="") as f:
                f.write(text)
        except OSError as e:
            raise DataError(f"Cannot write {path}: {e}") from e
        return path

    # -- checkpoints -------------------------------------------------------
    def save_checkpoint(self, model, epoch: int, step: int, phase: str = "base",
                        optimizer=None, scheduler=None, config: Optional[dict] = None,
                        history: Optional[List[dict]] = None) -> Path:
        state = {
            "format_version": SYSTEM_SETTINGS["checkpoint_version"],
            "epoch": epoch,
            "step": step,
            "phase": phase,
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer else None,
            "scheduler": scheduler.state_dict() if scheduler else None,
            "config": config or {},
            "model_config": dict(getattr(model, "cfg", {})),
            "skeleton": model.skeleton.to_dict() if hasattr(model, "skeleton") else None,
            "history": list(history or []),
        }
        path = self.checkpoint_dir / f"{phase}_epoch_{epoch:03d}.pt"
        try:
            self.checkpoint_dir.mkdir(exist_ok=True)
            torch.save(state, path)
        except OSError as e:
            raise CheckpointError(f"Cannot save checkpoint {path}: {e}") from e
        logger.info(f"💾 Saved checkpoint {path.name}")
        return path

    # -- logs and reports --------------------------------------------------
    def write_loss_log(self, rows: List[dict], columns=None) -> Path:
        columns = columns or LOSS_COLUMNS
        buffer = io.StringIO(newline="")
        writer = csv.DictWriter(buffer, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in columns})
        return self._write(LOSS_LOG, buffer.getvalue())

    def write_json(self, name: str, doc) -> Path:
        path = self._write(name, json.dumps(doc, indent=2, sort_keys=True, default=_json_default))
        logger.info(f"💾 Wrote {name}")
        return path

    def write_text(self, name: str, text: str) -> Path:
        return self._write(name, text if text.endswith("\n") else text + "\n")

    def write_manifest(self, manifest: RunManifest) -> Path:
        missing = manifest.missing_files()
        if missing:
            raise DataError(f"Manifest references missing file {missing[0]}")
        return self.write_json(MANIFEST, manifest.to_dict())


def read_loss_log(path: Union[str, Path]) -> List[dict]:
    with open(path, newline="") as f:
        return [dict(row) for row in csv.DictReader(f)]
