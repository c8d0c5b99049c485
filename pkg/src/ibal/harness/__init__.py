"""Experiment orchestration: configs, checkpoints, metrics, evaluation, ablations."""
from .checkpoint import (CheckpointCorruptError, CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                         CheckpointVersionError, MissingFieldsError, load_checkpoint, save_checkpoint)
from .config import ExperimentConfig, load_config, save_config
from .evaluation import EvalCell, EvalReport, run_eval
from .metrics import MetricsWriter, SchemaError, write_metrics
from .midump import mi_dump

__all__ = ["CheckpointCorruptError", "CheckpointError", "CheckpointShapeError", "CheckpointTruncatedError",
           "CheckpointVersionError", "MissingFieldsError", "load_checkpoint", "save_checkpoint",
           "ExperimentConfig", "load_config", "save_config", "EvalCell", "EvalReport", "run_eval",
           "MetricsWriter", "SchemaError", "write_metrics", "mi_dump"]
