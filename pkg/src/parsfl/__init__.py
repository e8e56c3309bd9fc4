"""Clustered parallel split learning on a simulated heterogeneous fleet."""

from .config import ExperimentConfig, scenario
from .engine import RoundMetrics, TrainingResult, run_training

__all__ = ["ExperimentConfig", "RoundMetrics", "TrainingResult", "run_training", "scenario"]
__version__ = "0.1.0"
