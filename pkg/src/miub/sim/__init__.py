"""Deterministic toy LoRA transformer: model, task, training and grids."""

from .config import (DEFAULT_RANK_GRID, DEFAULT_SHARE_GRID, LENGTH_BINS,
                     ToySimConfig)
from .driver import (GridCellResult, TrainStats, capture_hidden, dataset_loss,
                     run_cell, run_scaling_grid, train_lora)
from .model import (ToyModel, apply_layer_sharing, backward, base_checksum,
                    build_model, effective_base_params, forward,
                    lora_param_count, loss_from_logits)
from .task import TaskDataset, generate_synthetic_task

__all__ = [
    "DEFAULT_RANK_GRID", "DEFAULT_SHARE_GRID", "LENGTH_BINS", "ToySimConfig",
    "GridCellResult", "TrainStats", "capture_hidden", "dataset_loss",
    "run_cell", "run_scaling_grid", "train_lora",
    "ToyModel", "apply_layer_sharing", "backward", "base_checksum",
    "build_model", "effective_base_params", "forward", "lora_param_count",
    "loss_from_logits",
    "TaskDataset", "generate_synthetic_task",
]
