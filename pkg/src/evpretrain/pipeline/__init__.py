"""Configuration, training, evaluation and reporting."""

from .config import METHODS, ConfigError, TrainConfig, load_config, loads_config, save_config
from .evaluation import EmptySplitError, EvalReport, ReportError, evaluate, export_report
from .metrics import DegeneratePoseError, MetricError, compute_mpjpe, compute_pa_mpjpe
from .training import (
    NonFiniteLoss,
    TrainingError,
    UnlabeledAccessError,
    UnlabeledView,
    finetune,
    pretrain,
    scratch_checkpoint,
)

__all__ = [
    "METHODS", "ConfigError", "TrainConfig", "load_config", "loads_config", "save_config",
    "EmptySplitError", "EvalReport", "ReportError", "evaluate", "export_report",
    "DegeneratePoseError", "MetricError", "compute_mpjpe", "compute_pa_mpjpe",
    "NonFiniteLoss", "TrainingError", "UnlabeledAccessError", "UnlabeledView",
    "finetune", "pretrain", "scratch_checkpoint",
]
