""" Teacher-forced rollouts, truncated BPTT and the training loop """

from .episodes import EmptyDatasetError, EpisodePool, RecordStream
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .rollout import RolloutGenerators, WindowResult, mlm_step, rollout_window, sample_threshold, sample_thresholds
from .trainer import StepMetrics, Trainer, TrainingDivergedError, run_training

__all__ = [
    "EmptyDatasetError", "EpisodePool", "RecordStream",
    "GradCheckError", "GradCheckReport", "grad_check",
    "RolloutGenerators", "WindowResult", "mlm_step", "rollout_window", "sample_threshold", "sample_thresholds",
    "StepMetrics", "Trainer", "TrainingDivergedError", "run_training",
]
