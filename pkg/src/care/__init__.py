"""Anchored subgroup advantage shaping for group-sampled policy optimisation."""

from .advantage import AdvantageReport, grpo_advantages, predict_signature, shape_group
from .config import EngineConfig
from .errors import (
    CareError,
    ConfigError,
    ContractViolation,
    DataError,
    DegenerateSubgroupError,
    DivergenceError,
    InfiniteDivergenceError,
    MalformedRolloutError,
    MissingEmbeddingError,
)
from .objective import clipped_surrogate, region_weights, token_advantages
from .rgr import run_reflection
from .rollout import Group, Rollout, Span, VerdictSignals, make_rollout
from .selector import SubgroupPlan, plan_subgroup

__version__ = "0.1.0"

__all__ = [
    "AdvantageReport",
    "CareError",
    "ConfigError",
    "ContractViolation",
    "DataError",
    "DegenerateSubgroupError",
    "DivergenceError",
    "EngineConfig",
    "Group",
    "InfiniteDivergenceError",
    "MalformedRolloutError",
    "MissingEmbeddingError",
    "Rollout",
    "Span",
    "SubgroupPlan",
    "VerdictSignals",
    "clipped_surrogate",
    "grpo_advantages",
    "make_rollout",
    "plan_subgroup",
    "predict_signature",
    "region_weights",
    "run_reflection",
    "shape_group",
    "token_advantages",
]
