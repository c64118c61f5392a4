"""Reflection-guided resampling: one cue-conditioned retry of a hard negative."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional, Protocol

import numpy as np

from .config import EngineConfig
from .errors import ContractViolation
from .rollout import Group, Rollout
from .selector import VERIFIED, SubgroupPlan

REPAIR_CUE = (
    "The reasoning above reaches a wrong result. Find the first step that "
    "went wrong, fix it and recompute from there. Be brief."
)

NOT_TRIGGERED = "not_triggered"
SUCCESS_REPLACED = "success_replaced"
FAILURE_APPENDED = "failure_appended"


@dataclass(frozen=True)
class ResampleRequest:
    """One decode request.

    ``target`` is ``None`` for the unconditioned ``random`` control.
    ``cue`` holds the repair-cue text when ``cue_mode == "repair_cue"``.
    """

    prompt_id: Any
    target: Optional[Rollout]
    cue_mode: str
    cue: Optional[str] = None
    decoding: dict = field(default_factory=dict)

    @property
    def cue_flag(self) -> bool:
        return self.cue is not None


class Resampler(Protocol):
    def __call__(self, request: ResampleRequest) -> Rollout: ...


@dataclass(frozen=True)
class RgrOutcome:
    triggered: bool
    target_index: Optional[int] = None
    result: str = NOT_TRIGGERED
    reflected_rollout: Optional[Rollout] = None
    cue_used: str = "repair_cue"

    def __post_init__(self):
        r = self.reflected_rollout
        if self.result == NOT_TRIGGERED and r is not None:
            raise ContractViolation("untriggered outcome carries a rollout")
        if self.result == SUCCESS_REPLACED and (r is None or r.verdict.acc != 1.0):
            raise ContractViolation("replacement requires a verifier-positive reflection")
        if self.result == FAILURE_APPENDED and (r is None or not (r.reflected and r.reflection_failed)):
            raise ContractViolation("appended failure must be flagged reflected and failed")


def should_trigger(plan: SubgroupPlan, cfg: EngineConfig) -> bool:
    return bool(cfg.reflection and plan.anchor_kind == VERIFIED and not plan.skipped and plan.k_realized >= 1)


def select_target(plan: SubgroupPlan) -> int:
    """Selected negative nearest to the anchor; lower index on ties."""
    if not plan.negative_indices:
        raise ContractViolation("no negative to reflect on")
    if len(plan.distances) != len(plan.negative_indices):
        return min(plan.negative_indices)
    return min(zip(plan.distances, plan.negative_indices))[1]


def build_repair_prompt(target: Rollout, cue_mode: str, prompt_id=None, decoding: dict | None = None) -> ResampleRequest:
    if target.verdict.acc == 1.0:
        raise ContractViolation("repair target must be a failure")
    pid = prompt_id if prompt_id is not None else target.prompt_id
    decoding = dict(decoding or {})
    if cue_mode == "repair_cue":
        return ResampleRequest(pid, target, cue_mode, REPAIR_CUE, decoding)
    if cue_mode == "no_cue":
        return ResampleRequest(pid, target, cue_mode, None, decoding)
    if cue_mode == "random":
        return ResampleRequest(pid, None, cue_mode, None, decoding)
    raise ValueError(f"unknown cue mode {cue_mode!r}")


def mark_reflected(rollout: Rollout) -> Rollout:
    failed = rollout.verdict.acc != 1.0
    return dataclasses.replace(rollout, reflected=True, reflection_failed=failed)


def apply_outcome(group: Group, plan: SubgroupPlan, target: int, reflected: Rollout):
    """Fold a scored reflection into the subgroup.

    Returns ``(augmented_group, members, outcome)``. On success the
    target leaves the subgroup and the reflection joins it as a
    non-anchor member; on failure the reflection is appended and flagged
    for the reduced scale. The anchor never changes.
    """
    if reflected.prompt_id is not None and reflected.prompt_id != group.prompt_id:
        raise ContractViolation("reflected rollout comes from a different prompt")
    if not reflected.reflected:
        reflected = mark_reflected(reflected)
    if reflected.prompt_id is None:
        reflected = dataclasses.replace(reflected, prompt_id=group.prompt_id)
    aug = group.augmented(reflected)
    new = len(group)
    if reflected.verdict.acc == 1.0:
        negs = tuple(j for j in plan.negative_indices if j != target)
        members = (plan.anchor_index,) + negs + (new,)
        result = SUCCESS_REPLACED
    else:
        members = plan.members + (new,)
        result = FAILURE_APPENDED
    outcome = RgrOutcome(True, target, result, reflected)
    return aug, members, outcome


def run_reflection(group: Group, plan: SubgroupPlan, cfg: EngineConfig, resampler: Resampler,
                   decoding: dict | None = None):
    """Trigger check, one resample, and bookkeeping.

    Returns ``(group, members, outcome)``; untriggered groups come back
    unchanged with the plan's members.
    """
    if not should_trigger(plan, cfg):
        return group, plan.members, RgrOutcome(False, cue_used=cfg.cue_mode)
    target = select_target(plan)
    req = build_repair_prompt(group.rollouts[target], cfg.cue_mode, group.prompt_id, decoding)
    reflected = resampler(req)
    aug, members, outcome = apply_outcome(group, plan, target, reflected)
    return aug, members, dataclasses.replace(outcome, cue_used=cfg.cue_mode)


class ReplayResampler:
    """Serves pre-decoded reflections keyed by prompt id (offline mode)."""

    def __init__(self, rollouts_by_prompt: dict):
        self._table = dict(rollouts_by_prompt)
        self.calls = 0

    def __call__(self, request: ResampleRequest) -> Rollout:
        self.calls += 1
        try:
            return self._table[request.prompt_id]
        except KeyError:
            raise ContractViolation(f"no replayed reflection for prompt {request.prompt_id!r}") from None


def reflection_members_flags(group: Group) -> np.ndarray:
    return np.array([r.reflection_failed for r in group.rollouts], dtype=bool)
