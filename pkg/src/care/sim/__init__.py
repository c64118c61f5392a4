"""Desk-scale simulated training on modular-arithmetic chains."""

from .policy import ToyPolicy
from .task import SyntheticTask, TaskDistribution
from .trainer import SimConfig, StepMetrics, sample_group, train, train_care, train_grpo_baseline

__all__ = [
    "SimConfig",
    "StepMetrics",
    "SyntheticTask",
    "TaskDistribution",
    "ToyPolicy",
    "sample_group",
    "train",
    "train_care",
    "train_grpo_baseline",
]
