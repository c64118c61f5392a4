"""Region-weighted token credit, clipped surrogate, KL term and batch diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InfiniteDivergenceError
from .rollout import Rollout


@dataclass(frozen=True, eq=False)
class TokenCredit:
    """Credit for one rollout: weights, per-token advantages and ``sum(w) + eps_w``."""

    weights: np.ndarray
    advantages: np.ndarray
    weight_sum: float
    sequence_advantage: float


@dataclass(frozen=True, eq=False)
class SurrogateReport:
    loss_pg: float
    kl: float
    total: float
    grad_logp: np.ndarray
    clip_mask: np.ndarray
    neg_answer_clip_rate: Optional[float] = None
    tokens_counted: int = 0
    warning: Optional[str] = field(default=None)


def region_weights(rollout: Rollout, gamma_pos: float, mode: str = "region") -> np.ndarray:
    """Per-token weights over the rollout.

    ``region``: answer 1, think ``gamma_pos`` on positives and 0 on
    negatives. ``answer_only`` zeroes every think token, ``region_unmasked``
    gives failing think tokens ``gamma_pos`` too, ``uniform`` puts 1 on both
    spans. Tokens outside both spans always get 0.
    """
    w = np.zeros(rollout.length)
    positive = rollout.verdict.acc == 1.0
    if mode == "uniform":
        think_w = 1.0
    elif mode == "answer_only":
        think_w = 0.0
    elif mode == "region_unmasked":
        think_w = gamma_pos
    elif mode == "region":
        think_w = gamma_pos if positive else 0.0
    else:
        raise ValueError(f"unknown weighting mode {mode!r}")
    w[rollout.think.start : rollout.think.end] = think_w
    w[rollout.answer.start : rollout.answer.end] = 1.0
    return w


def token_advantages(seq_adv: float, weights: np.ndarray, eps_w: float) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    return seq_adv * weights / (weights.sum() + eps_w)


def token_credit(rollout: Rollout, seq_adv: float, gamma_pos: float, eps_w: float, mode: str = "region") -> TokenCredit:
    w = region_weights(rollout, gamma_pos, mode)
    return TokenCredit(w, token_advantages(seq_adv, w, eps_w), float(w.sum() + eps_w), float(seq_adv))


def clipped_surrogate(
    advantages,
    ratios,
    n_credited: int,
    clip_low: float,
    clip_high: float,
    *,
    neg_answer_mask=None,
) -> SurrogateReport:
    """Clipped policy-gradient loss over a flat token list.

    The gradient is with respect to each token's current log-probability:
    ``-(ratio * a) / n_credited`` where the unclipped branch attains the
    minimum (ties included), 0 elsewhere.
    """
    a = np.asarray(advantages, dtype=np.float64)
    rho = np.asarray(ratios, dtype=np.float64)
    if n_credited == 0:
        z = np.zeros_like(a)
        return SurrogateReport(0.0, 0.0, 0.0, z, z.astype(bool), None, 0, "empty credited set")
    if np.any(rho <= 0):
        raise ValueError("importance ratios must be positive")
    un = rho * a
    cl = np.clip(rho, 1.0 - clip_low, 1.0 + clip_high) * a
    clipped = cl < un
    obj = np.where(clipped, cl, un)
    loss = -obj.sum() / n_credited
    grad = np.where(clipped, 0.0, -un / n_credited)
    rate = None
    if neg_answer_mask is not None:
        m = np.asarray(neg_answer_mask, dtype=bool)
        rate = float(clipped[m].mean()) if m.any() else None
    return SurrogateReport(float(loss), 0.0, float(loss), grad, clipped, rate, int(a.size))


def with_kl(report: SurrogateReport, kl: float, beta: float) -> SurrogateReport:
    return SurrogateReport(report.loss_pg, kl, report.loss_pg + beta * kl, report.grad_logp,
                           report.clip_mask, report.neg_answer_clip_rate, report.tokens_counted, report.warning)


def kl_regularizer(policy_probs, ref_probs) -> float:
    """Mean over positions (rows) of the exact categorical KL(policy || ref)."""
    p = np.atleast_2d(np.asarray(policy_probs, dtype=np.float64))
    q = np.atleast_2d(np.asarray(ref_probs, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError("policy and reference must share the same alphabet at every position")
    if np.any((q == 0) & (p > 0)):
        raise InfiniteDivergenceError("reference assigns zero mass where the policy does not")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    return float(terms.sum(axis=1).mean())


def variance_ratio(neg_final: Sequence[float], anchor_final: Sequence[float]) -> Optional[float]:
    """Var(negative finals) / Var(anchor finals); ``None`` when undefined."""
    neg = np.asarray(neg_final, dtype=np.float64)
    anc = np.asarray(anchor_final, dtype=np.float64)
    if neg.size < 1 or anc.size < 2:
        return None
    va = anc.var()
    if va <= 1e-300:
        return None
    return float(neg.var() / va)


def diagnostics(reports, clip_masks=None, neg_answer_masks=None) -> tuple[Optional[float], Optional[float]]:
    """Batch negative-answer clip rate and negatives/anchors variance ratio.

    ``reports`` are :class:`~care.advantage.AdvantageReport` objects.
    ``clip_masks``/``neg_answer_masks`` are matching flat token arrays.
    """
    anchors, negs = [], []
    for rep in reports:
        if rep.anchor_index is None or rep.mode == "skipped":
            continue
        anchors.append(rep.final[rep.anchor_index])
        negs.extend(rep.final[i] for i in rep.negatives)
    rate = None
    if clip_masks is not None and neg_answer_masks is not None:
        cm = np.concatenate([np.asarray(c, bool) for c in clip_masks]) if len(clip_masks) else np.zeros(0, bool)
        nm = np.concatenate([np.asarray(c, bool) for c in neg_answer_masks]) if len(neg_answer_masks) else np.zeros(0, bool)
        rate = float(cm[nm].mean()) if nm.any() else None
    if not negs or not anchors:
        warnings.warn("diagnostics need at least one anchor and one negative", RuntimeWarning, stacklevel=2)
    return rate, variance_ratio(negs, anchors)
