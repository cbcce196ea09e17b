"""Continual self-supervised learning with cross-task and cross-model mixup."""

from .buffer import MemoryBuffer
from .data import (AugmentationPolicy, LabeledDataset, SyntheticConfig,
                   TaskSequence, load_dataset, split_class_incremental,
                   split_data_incremental, two_views)
from .evaluation import MetricsReport, TaskClassMap, classification_report
from .losses import SslLossSpec, ssl_loss
from .mixup import build_mix_batch, mix, sample_lambda
from .models import FrozenModel, ModelConfig, TriNet, build_trinet, snapshot
from .objective import LossBundle, cromo_loss, distill_loss, total_loss
from .trainer import RunState, TrainConfig, run_continual

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "FrozenModel", "LabeledDataset", "LossBundle",
    "MemoryBuffer", "MetricsReport", "ModelConfig", "RunState", "SslLossSpec",
    "SyntheticConfig", "TaskClassMap", "TaskSequence", "TrainConfig", "TriNet",
    "build_mix_batch", "build_trinet", "classification_report", "cromo_loss",
    "distill_loss", "load_dataset", "mix", "run_continual", "sample_lambda",
    "snapshot", "split_class_incremental", "split_data_incremental",
    "ssl_loss", "total_loss", "two_views",
]
