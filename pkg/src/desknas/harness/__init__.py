"""Configuration, datasets, checkpoints, run orchestration and the CLI."""

from .checkpoint import load_checkpoint, restore_state, save_checkpoint
from .config import ExperimentConfig, set_key, validate
from .data import DatasetHandle, load_dataset
from .run import RunResult, run

__all__ = [
    "DatasetHandle", "ExperimentConfig", "RunResult", "load_checkpoint", "load_dataset",
    "restore_state", "run", "save_checkpoint", "set_key", "validate",
]
