"""Gram-weighted model merging for domain-incremental continual learning."""

from .estimators import LoraSegmenter, RegCLMerger
from .linalg import GramMatrix, SingularGramError, gram, gram_accumulate, solve_spd
from .merging import (
    MergeConfig,
    MergeState,
    TopologyError,
    fold,
    mean_checkpoints,
    mean_merge_step,
    mean_step,
    merge_adapters,
    merge_batch,
    merge_checkpoints,
    merge_pair,
    regcl_step,
)
from .metrics import ContinualMetrics, ResultMatrix, continual_metrics, seg_metrics
from .model import Checkpoint, LayerParams, LoraAdapter, ToyModel, apply_adapter, build_toy_model, init_adapter
from .training import LossConfig, TrainConfig, TrainingDiverged, total_loss, train_task

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ContinualMetrics",
    "GramMatrix",
    "LayerParams",
    "LoraAdapter",
    "LoraSegmenter",
    "LossConfig",
    "MergeConfig",
    "MergeState",
    "RegCLMerger",
    "ResultMatrix",
    "SingularGramError",
    "ToyModel",
    "TopologyError",
    "TrainConfig",
    "TrainingDiverged",
    "apply_adapter",
    "build_toy_model",
    "continual_metrics",
    "fold",
    "gram",
    "gram_accumulate",
    "init_adapter",
    "mean_checkpoints",
    "mean_merge_step",
    "mean_step",
    "merge_adapters",
    "merge_batch",
    "merge_checkpoints",
    "merge_pair",
    "regcl_step",
    "seg_metrics",
    "solve_spd",
    "total_loss",
    "train_task",
]
