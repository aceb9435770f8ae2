"""Continual learning with a probed, protected LoRA mixture of experts."""

from .config import ExperimentConfig, load_config
from .metrics import AccuracyMatrix, summarize
from .moe import ModelConfig, MoeClassifier, count_trainable_params
from .taskgen import make_stream
from .trainer import Ablation, ContinualState, TrainConfig, run_stream

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "Ablation",
    "ContinualState",
    "ExperimentConfig",
    "ModelConfig",
    "MoeClassifier",
    "TrainConfig",
    "count_trainable_params",
    "load_config",
    "make_stream",
    "run_stream",
    "summarize",
]
