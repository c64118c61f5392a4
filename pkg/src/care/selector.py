"""Anchored subgroup construction: anchor choice, hard-negative ranking, pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import EngineConfig
from .errors import ContractViolation, MissingEmbeddingError
from .rollout import Group

VERIFIED = "verified"
PSEUDO = "pseudo"
SKIP_ALL_POSITIVE = "all_positive_no_negatives"
SKIP_EMPTY = "empty_group"


@dataclass(frozen=True)
class SubgroupPlan:
    anchor_kind: Optional[str]
    anchor_index: Optional[int]
    negative_indices: tuple = ()
    k_target: int = 4
    k_realized: int = 0
    skip: Optional[str] = None
    # anchor distance of each selected negative, aligned with negative_indices
    distances: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "negative_indices", tuple(int(i) for i in self.negative_indices))
        if self.anchor_index is not None and self.anchor_index in self.negative_indices:
            raise ContractViolation("anchor listed among negatives")
        if self.k_realized != len(self.negative_indices):
            raise ContractViolation("k_realized must equal the number of negatives")
        if self.skip is not None and self.negative_indices:
            raise ContractViolation("skipped plans carry no negatives")

    @property
    def skipped(self) -> bool:
        return self.skip is not None

    @property
    def members(self) -> tuple:
        if self.anchor_index is None:
            return ()
        return (self.anchor_index,) + self.negative_indices


def select_anchor(group: Group) -> Optional[int]:
    """Positive with the shortest think span; ties go to the shorter answer, then lower index."""
    best = None
    for i, r in enumerate(group.rollouts):
        if r.verdict.acc != 1.0:
            continue
        key = (r.think_len, r.answer_len, i)
        if best is None or key < best:
            best = key
    return None if best is None else best[2]


def select_anchor_random(group: Group, rng: np.random.Generator) -> Optional[int]:
    pos = group.positives()
    if not pos:
        return None
    return int(pos[rng.integers(len(pos))])


def select_proxy_anchor(group: Group, length_normalized: bool = False) -> int:
    """Failure with the highest old-policy sequence log-probability (lowest index on ties)."""
    if any(r.verdict.acc == 1.0 for r in group.rollouts):
        raise ContractViolation("proxy anchor requested for a group that contains a positive")
    if len(group) == 0:
        raise ContractViolation("proxy anchor requested for an empty group")
    best_i, best = 0, -math.inf
    for i, r in enumerate(group.rollouts):
        score = r.old_logprob_total
        if length_normalized:
            score = score / max(r.length, 1)
        if score > best:
            best_i, best = i, score
    return best_i


def _embeddings(group: Group, indices: Sequence[int]) -> np.ndarray:
    rows = []
    for i in indices:
        e = group.rollouts[i].embedding
        if e is None:
            raise MissingEmbeddingError(i)
        rows.append(e)
    return np.vstack(rows) if rows else np.zeros((0, 0))


def rank_hard_negatives(
    group: Group,
    anchor: int,
    pool: Optional[Sequence[int]] = None,
    farthest_first: bool = False,
) -> list[tuple[int, float]]:
    """Failures ordered by cosine distance to the anchor's rationale embedding.

    ``pool`` defaults to every failure other than the anchor. Ties break
    toward the smaller index in both orderings. Embeddings are treated as
    constants.
    """
    if pool is None:
        pool = [i for i in group.failures() if i != anchor]
    pool = [int(i) for i in pool]
    if group.rollouts[anchor].embedding is None:
        raise MissingEmbeddingError(anchor)
    if not pool:
        return []
    h = _embeddings(group, pool)
    d = 1.0 - h @ group.rollouts[anchor].embedding
    idx = np.asarray(pool)
    order = np.lexsort((idx, -d if farthest_first else d))
    return [(int(idx[j]), float(d[j])) for j in order]


def diversify(preselect: Sequence[tuple[int, float]], k: int, group: Group) -> list[int]:
    """Greedy farthest-first pruning of a nearest-first candidate list.

    Starts from the nearest candidate, then repeatedly adds the candidate
    whose minimum cosine distance to the chosen set is largest. Ties go to
    the smaller anchor distance, then the smaller index.
    """
    preselect = list(preselect)
    if k >= len(preselect):
        return [i for i, _ in preselect]
    if k <= 0:
        return []
    idx = [i for i, _ in preselect]
    anchor_d = [d for _, d in preselect]
    h = _embeddings(group, idx)
    pair = 1.0 - h @ h.T
    chosen = [0]
    min_d = pair[0].copy()
    remaining = set(range(1, len(idx)))
    while len(chosen) < k:
        best = max(remaining, key=lambda j: (min_d[j], -anchor_d[j], -idx[j]))
        chosen.append(best)
        remaining.discard(best)
        min_d = np.minimum(min_d, pair[best])
    return [idx[j] for j in chosen]


def _pick_negatives(group, anchor, pool, k, cfg: EngineConfig, rng):
    """Return (indices, anchor distances) for ``k`` negatives from ``pool``."""
    if k == 0:
        return [], []
    ranked = rank_hard_negatives(group, anchor, pool)
    dist = dict(ranked)
    if cfg.selector == "nearest":
        chosen = diversify(ranked[: max(cfg.M, k)], k, group)
    elif cfg.selector == "farthest":
        chosen = [i for i, _ in ranked[::-1][:k]]
    elif cfg.selector == "mixed":
        near = (k + 1) // 2
        chosen = [i for i, _ in ranked[:near]]
        far = [i for i, _ in ranked[::-1] if i not in chosen]
        chosen += far[: k - near]
    else:
        if rng is None:
            raise ContractViolation("random selector needs an rng")
        picks = rng.choice(len(ranked), size=k, replace=False)
        chosen = [ranked[j][0] for j in sorted(picks)]
    return chosen, [dist[i] for i in chosen]


def plan_subgroup(group: Group, cfg: EngineConfig, rng: np.random.Generator | None = None) -> SubgroupPlan:
    """Anchor plus up to ``K`` hard negatives, or a skip with its reason."""
    if len(group) == 0:
        return SubgroupPlan(None, None, k_target=cfg.K, skip=SKIP_EMPTY)
    if cfg.anchor_rule == "random":
        if rng is None:
            raise ContractViolation("random anchor rule needs an rng")
        anchor = select_anchor_random(group, rng)
    else:
        anchor = select_anchor(group)
    failures = group.failures()
    if anchor is not None:
        k = min(cfg.K, len(failures))
        if k == 0:
            return SubgroupPlan(VERIFIED, anchor, k_target=cfg.K, skip=SKIP_ALL_POSITIVE)
        negs, dists = _pick_negatives(group, anchor, failures, k, cfg, rng)
        return SubgroupPlan(VERIFIED, anchor, tuple(negs), cfg.K, len(negs), None, tuple(dists))
    if len(failures) < 2:
        return SubgroupPlan(None, None, k_target=cfg.K, skip=SKIP_EMPTY)
    proxy = select_proxy_anchor(group, length_normalized=cfg.proxy_score == "mean")
    pool = [i for i in failures if i != proxy]
    k = min(cfg.K, len(pool))
    negs, dists = _pick_negatives(group, proxy, pool, k, cfg, rng)
    return SubgroupPlan(PSEUDO, proxy, tuple(negs), cfg.K, len(negs), None, tuple(dists))
