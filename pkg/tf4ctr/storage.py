"""Run directory layout: config copy, manifest, CSV logs, metrics and checkpoints."""

import json
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel

from .config import dump_config, load_config
from .data import FieldVocab, load_vocab_sidecar, save_vocab_sidecar
from .diffcore import Module
from .errors import CheckpointError
from .models import ModelConfig, RunManifest

logger = structlog.get_logger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
_VERSION_KEY = "__format_version__"
_EPOCH_KEY = "__epoch__"

HISTORY_COLUMNS = [
    "epoch",
    "train_loss",
    "train_loss_ctr",
    "train_loss_tf",
    "valid_auc",
    "valid_gauc",
    "valid_logloss",
    "lr",
]
GRADNORM_COLUMNS = ["epoch", "batch_index", "grad_norm_zs", "grad_norm_zc", "loss_ctr", "loss_tf"]
TIMING_COLUMNS = ["epoch", "phase", "seconds", "per_sample_ms"]
CATEGORY_COLUMNS = ["epoch", "split", "class", "category", "count"]


class RunStore:
    """Reads and writes the files of one run directory."""

    def __init__(self, run_dir: Path):
        """Initialize the store; nothing is created until ``create``."""
        self.run_dir = Path(run_dir)
        self.config_path = self.run_dir / "config.cfg"
        self.manifest_path = self.run_dir / "manifest.json"
        self.history_path = self.run_dir / "history.csv"
        self.gradnorm_path = self.run_dir / "gradnorm.csv"
        self.timing_path = self.run_dir / "timing.csv"
        self.category_path = self.run_dir / "category_hist.csv"
        self.metrics_path = self.run_dir / "metrics.jsonl"
        self.checkpoint_path = self.run_dir / "checkpoint.npz"
        self.vocab_path = self.run_dir / "vocab.csv"
        self.checkpoint_dir = self.run_dir / "checkpoints"

    def create(self) -> "RunStore":
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            logger.info("Run directory ready", run_dir=str(self.run_dir))
        except OSError as e:
            logger.error("Failed to create run directory", run_dir=str(self.run_dir), error=str(e))
            raise
        return self

    def output_paths(self) -> dict[str, str]:
        return {
            "config": str(self.config_path),
            "history": str(self.history_path),
            "gradnorm": str(self.gradnorm_path),
            "timing": str(self.timing_path),
            "category_hist": str(self.category_path),
            "metrics": str(self.metrics_path),
            "checkpoint": str(self.checkpoint_path),
            "vocab": str(self.vocab_path),
        }

    def write_config(self, config: ModelConfig) -> Path:
        self.config_path.write_text(dump_config(config), encoding="utf-8")
        return self.config_path

    def read_config(self) -> ModelConfig:
        return load_config(self.config_path)

    def write_manifest(self, manifest: RunManifest) -> Path:
        self.manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        return self.manifest_path

    def read_manifest(self) -> RunManifest:
        return RunManifest.model_validate_json(self.manifest_path.read_text(encoding="utf-8"))

    def mark_finished(self, finished_at: Optional[datetime] = None) -> RunManifest:
        """Stamp the completion time; the only change made after training starts."""
        manifest = self.read_manifest()
        manifest.finished_at = finished_at or datetime.now()
        self.write_manifest(manifest)
        return manifest

    def write_vocab(self, vocabs: Sequence[FieldVocab]) -> Path:
        return save_vocab_sidecar(vocabs, self.vocab_path)

    def read_vocab(self) -> list[FieldVocab]:
        return load_vocab_sidecar(self.vocab_path)

    @staticmethod
    def write_table(path: Path, rows: Iterable, columns: Sequence[str]) -> Path:
        """Write pydantic records or dicts as CSV with a fixed column order."""
        records = [r.model_dump() if isinstance(r, BaseModel) else dict(r) for r in rows]
        frame = pd.DataFrame(records, columns=list(columns))
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
        return path

    def clear_metrics(self) -> None:
        self.metrics_path.unlink(missing_ok=True)

    def append_metrics(self, record: BaseModel) -> Path:
        with self.metrics_path.open("a", encoding="utf-8") as handle:
            handle.write(record.model_dump_json() + "\n")
        return self.metrics_path

    def read_metrics(self) -> list[dict]:
        if not self.metrics_path.exists():
            return []
        lines = self.metrics_path.read_text(encoding="utf-8").splitlines()
        return [json.loads(line) for line in lines if line.strip()]

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.checkpoint_dir / f"epoch_{epoch:03d}.npz"

    def epoch_checkpoints(self) -> list[Path]:
        if not self.checkpoint_dir.exists():
            return []
        return sorted(self.checkpoint_dir.glob("epoch_*.npz"))

    def save_checkpoint(self, module: Module, path: Optional[Path] = None, epoch: int = 0) -> Path:
        path = Path(path or self.checkpoint_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = dict(module.state_dict())
        arrays[_VERSION_KEY] = np.array(CHECKPOINT_FORMAT_VERSION)
        arrays[_EPOCH_KEY] = np.array(epoch)
        with path.open("wb") as handle:
            np.savez(handle, **arrays)
        logger.debug("Checkpoint saved", path=str(path), epoch=epoch)
        return path

    def load_checkpoint(self, module: Module, path: Optional[Path] = None) -> int:
        """Load parameters into ``module``; returns the epoch stored with them."""
        path = Path(path or self.checkpoint_path)
        if not path.exists():
            raise CheckpointError(f"Checkpoint not found: {path}")
        try:
            with np.load(path) as archive:
                arrays = {key: archive[key] for key in archive.files}
        except (OSError, ValueError) as e:
            logger.error("Failed to read checkpoint", path=str(path), error=str(e))
            raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e
        version = int(arrays.pop(_VERSION_KEY, -1))
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint format {version} in {path}")
        epoch = int(arrays.pop(_EPOCH_KEY, 0))
        module.load_state_dict(arrays)
        return epoch
