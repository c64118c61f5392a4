"""Sequence-level advantages over an anchored subgroup.

Covers the within-subgroup z-score (plain and robust), negative-only
penalty scaling, the sqrt(K/K_S) update-size equalization, the zero-sum
rescue pseudo-rewards for all-negative groups, and the closed-form
two-level signature predictor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import EngineConfig
from .errors import ContractViolation, DegenerateSubgroupError
from .rollout import Group
from .selector import PSEUDO, SubgroupPlan

NORMAL = "normal"
RESCUE = "rescue"
SKIPPED = "skipped"


@dataclass(frozen=True, eq=False)
class AdvantageReport:
    """Per-rollout advantages for one (possibly augmented) group.

    Arrays are indexed by rollout position in the group; rollouts outside
    the subgroup hold 0 in ``raw``, ``final`` and ``applied_scale``.
    """

    mode: str
    mu: float
    sigma: float
    raw: np.ndarray
    final: np.ndarray
    applied_scale: np.ndarray
    equalization: float
    members: tuple = ()
    anchor_index: Optional[int] = None
    k_s: int = 0
    rewards_used: np.ndarray = field(default=None, repr=False)

    @property
    def in_subgroup(self) -> np.ndarray:
        mask = np.zeros(len(self.final), dtype=bool)
        mask[list(self.members)] = True
        return mask

    @property
    def negatives(self) -> tuple:
        if self.anchor_index is None:
            return ()
        r = self.rewards_used
        return tuple(i for i in self.members if i != self.anchor_index and r[i] < r[self.anchor_index])


def skipped_report(n: int) -> AdvantageReport:
    z = np.zeros(n)
    return AdvantageReport(SKIPPED, 0.0, 0.0, z, z.copy(), z.copy(), 1.0, rewards_used=z.copy())


def zscore(values, eps: float) -> tuple[float, float, np.ndarray]:
    """Population z-score with ``eps`` added to the standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DegenerateSubgroupError(f"subgroup needs at least 2 members (got {v.size})")
    mu = float(v.mean())
    sigma = float(np.sqrt(np.mean((v - mu) ** 2))) + eps
    return mu, sigma, (v - mu) / sigma


def robust_zscore(values, eps: float, trim_fraction: float) -> tuple[float, float, np.ndarray]:
    """Trimmed-mean center and raw median-absolute-deviation scale (no 1.4826 factor)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise DegenerateSubgroupError(f"subgroup needs at least 2 members (got {v.size})")
    cut = int(math.floor(trim_fraction * v.size))
    srt = np.sort(v)
    center = float(srt[cut : v.size - cut].mean())
    med = np.median(v)
    scale = float(np.median(np.abs(v - med))) + eps
    return center, scale, (v - center) / scale


def zscore_subgroup(rewards: Mapping[int, float], eps: float):
    """Mapping form of :func:`zscore`; returns ``(mu, sigma, {index: raw})``."""
    keys = list(rewards)
    mu, sigma, raw = zscore([rewards[k] for k in keys], eps)
    return mu, sigma, dict(zip(keys, raw.tolist()))


def robust_zscore_subgroup(rewards: Mapping[int, float], eps: float, trim_fraction: float):
    keys = list(rewards)
    c, sc, raw = robust_zscore([rewards[k] for k in keys], eps, trim_fraction)
    return c, sc, dict(zip(keys, raw.tolist()))


def rescue_pseudorewards(plan: SubgroupPlan, delta: float) -> dict[int, float]:
    """Zero-sum pseudo-contrast: ``delta`` on the proxy anchor, ``-delta/K'`` on each negative."""
    if plan.anchor_kind != PSEUDO:
        raise ContractViolation("rescue pseudo-rewards need a pseudo-anchor plan")
    k = plan.k_realized
    if k < 1:
        raise ContractViolation("rescue needs at least one negative")
    out = {plan.anchor_index: delta}
    for j in plan.negative_indices:
        out[j] = -delta / k
    return out


def scale_and_equalize(
    raw: np.ndarray,
    rewards: np.ndarray,
    members: Sequence[int],
    anchor: int,
    reflection_failed: np.ndarray,
    cfg: EngineConfig,
    *,
    mode: str = NORMAL,
    mu: float = 0.0,
    sigma: float = 0.0,
) -> AdvantageReport:
    """Turn raw subgroup advantages into final ones.

    Members scoring strictly below the anchor are negatives: their
    advantage becomes ``-scale * |raw|`` with ``scale = s_refl`` for failed
    reflections and ``s`` otherwise. Other non-anchor members (a reflected
    success) keep their raw value. When fewer than ``K`` negatives remain,
    everything is multiplied by ``sqrt(K / K_S)``.
    """
    n = len(raw)
    members = tuple(int(i) for i in members)
    neg = [i for i in members if i != anchor and rewards[i] < rewards[anchor]]
    k_s = len(neg)
    if k_s == 0:
        return skipped_report(n)
    final = np.zeros(n)
    scale = np.zeros(n)
    for i in members:
        final[i] = raw[i]
        scale[i] = 1.0
    for i in neg:
        scale[i] = cfg.s_refl if reflection_failed[i] else cfg.s
        final[i] = -scale[i] * abs(raw[i])
    eq = 1.0
    if cfg.equalize and k_s < cfg.K:
        eq = math.sqrt(cfg.K / k_s)
        final *= eq
    return AdvantageReport(mode, mu, sigma, np.asarray(raw, dtype=np.float64), final, scale, eq,
                           members, anchor, k_s, np.asarray(rewards, dtype=np.float64))


def shape_group(
    group: Group,
    plan: SubgroupPlan,
    cfg: EngineConfig,
    members: Sequence[int] | None = None,
) -> AdvantageReport:
    """Advantages for every rollout in ``group``.

    ``members`` overrides the plan's subgroup; reflection uses it after
    swapping in or appending the resampled rollout.
    """
    n = len(group)
    if plan.skipped:
        return skipped_report(n)
    members = tuple(plan.members if members is None else members)
    anchor = plan.anchor_index
    rewards = np.zeros(n)
    if plan.anchor_kind == PSEUDO:
        if not cfg.rescue:
            return skipped_report(n)
        for i, v in rescue_pseudorewards(plan, cfg.delta).items():
            rewards[i] = v
        mode = RESCUE
    else:
        rewards = group.rewards
        mode = NORMAL
    vals = rewards[list(members)]
    if cfg.robust:
        mu, sigma, r = robust_zscore(vals, cfg.eps, cfg.trim_fraction)
    else:
        mu, sigma, r = zscore(vals, cfg.eps)
    raw = np.zeros(n)
    raw[list(members)] = r
    failed = np.array([ro.reflection_failed for ro in group.rollouts], dtype=bool)
    return scale_and_equalize(raw, rewards, members, anchor, failed, cfg, mode=mode, mu=mu, sigma=sigma)


def grpo_advantages(rewards, eps: float) -> np.ndarray:
    """Baseline: z-score over the whole group, every rollout credited."""
    r = np.asarray(rewards, dtype=np.float64)
    return (r - r.mean()) / (r.std() + eps)


def attenuation(k_prime: int, delta_gap: float, var_neg: float, variant: str = "k_var") -> float:
    """Shrink factor of the two-level signature under negative-reward dispersion.

    ``k_var`` uses ``K' * var_neg``, which tracks the average over i.i.d.
    negative noise; ``k_plus_one_var`` uses ``(K' + 1) * var_neg``, which
    is exact when every group's negatives have population variance
    ``var_neg``.
    """
    if delta_gap <= 0:
        raise ValueError(f"reward gap must be positive (got {delta_gap})")
    if k_prime < 1:
        raise ValueError(f"k_prime must be >= 1 (got {k_prime})")
    if var_neg < 0:
        raise ValueError(f"negative variance must be >= 0 (got {var_neg})")
    if variant == "k_var":
        return delta_gap / math.sqrt(k_prime * var_neg + delta_gap**2)
    if variant == "k_plus_one_var":
        return (1.0 + (k_prime + 1) * var_neg / delta_gap**2) ** -0.5
    raise ValueError(f"unknown signature variant {variant!r}")


def predict_signature(k_prime: int, delta_gap: float, var_neg: float, variant: str = "k_var") -> tuple[float, float]:
    """Predicted (anchor advantage, mean negative advantage) for a two-level subgroup."""
    a = attenuation(k_prime, delta_gap, var_neg, variant)
    return a * math.sqrt(k_prime), -a / math.sqrt(k_prime)
