"""Multi-seed experiment suites over the simulator and the shaping engine."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import _kernels as K
from ..advantage import attenuation, shape_group
from ..config import EngineConfig
from ..objective import variance_ratio
from ..rollout import Group, VerdictSignals, embed_tokens, make_rollout
from ..selector import plan_subgroup
from .trainer import SimConfig, StepMetrics, train

SUITES = (
    "signature",
    "rgr-cues",
    "training-curves",
    "neg-scale",
    "rescue",
    "region-weights",
    "k-equalization",
    "anchor-rule",
    "srefl-sweep",
)

DEFAULT_SEEDS = 5
RESCUE_HORIZON = 50


@dataclass
class ExperimentResult:
    suite: str
    per_seed: list = field(default_factory=list)
    aggregate: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict, repr=False)


def ci95(values) -> tuple[float, float]:
    """Mean and half-width ``1.96 * sd / sqrt(n)`` (sample sd; 0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    half = 1.96 * v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else 0.0
    return float(v.mean()), float(half)


def ols(x, y) -> tuple[float, float, float]:
    """Least-squares line ``y = slope * x + intercept`` and its R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def pearson(x, y) -> float:
    return float(np.corrcoef(np.asarray(x, float), np.asarray(y, float))[0, 1])


def accuracy_at_tokens(metrics: list[StepMetrics], budget: float) -> float:
    """Eval accuracy after the last step whose cumulative token count fits in ``budget``."""
    cum = np.array([m.cumulative_output_tokens for m in metrics])
    i = int(np.searchsorted(cum, budget, side="right")) - 1
    return metrics[max(i, 0)].eval_accuracy


def steps_to_reach(metrics: list[StepMetrics], target: float) -> Optional[int]:
    """Number of steps until eval accuracy first reaches ``target``."""
    for m in metrics:
        if m.eval_accuracy >= target:
            return m.step + 1
    return None


def windowed_variance_ratio(metrics: list[StepMetrics], window: int) -> list[Optional[float]]:
    """Variance ratio pooled over consecutive windows of ``window`` steps."""
    out = []
    for s in range(0, len(metrics) - window + 1, window):
        neg = [v for m in metrics[s:s + window] for v in m.neg_finals]
        anc = [v for m in metrics[s:s + window] for v in m.anchor_finals]
        out.append(variance_ratio(neg, anc))
    return out


def rescue_events(metrics: list[StepMetrics], horizon: int = RESCUE_HORIZON):
    """``(dAcc@horizon, dKL)`` for every step that holds an all-negative group."""
    events = []
    for m in metrics:
        if m.allneg_groups > 0 and m.step + horizon < len(metrics):
            events.append((metrics[m.step + horizon].eval_accuracy - m.eval_accuracy, m.delta_kl_allneg))
    return events


def _arms(arms: dict, seeds: int, steps: Optional[int], progress: Optional[Callable]) -> dict:
    runs = {}
    for name, (cfg, sim, algo) in arms.items():
        runs[name] = []
        for seed in range(seeds):
            runs[name].append(train(cfg.replace(seed=seed), sim, algo=algo, steps=steps))
            if progress:
                progress(f"{name} seed {seed} done")
    return runs


def _curve_rows(runs: dict, per_seed: list, aggregate: list):
    for name, seeds in runs.items():
        for seed, ms in enumerate(seeds):
            for m in ms:
                per_seed.append({"arm": name, "seed": seed, "step": m.step, "eval_accuracy": m.eval_accuracy,
                                 "accuracy": m.accuracy, "mean_reward": m.mean_reward,
                                 "cumulative_output_tokens": m.cumulative_output_tokens,
                                 "mean_think_length": m.mean_think_length,
                                 "expected_think_length": m.expected_think_length})
        n_steps = min(len(ms) for ms in seeds)
        for step in range(n_steps):
            mean, half = ci95([ms[step].eval_accuracy for ms in seeds])
            rmean, rhalf = ci95([ms[step].mean_reward for ms in seeds])
            aggregate.append({"arm": name, "step": step, "eval_accuracy_mean": mean, "eval_accuracy_ci95": half,
                              "mean_reward_mean": rmean, "mean_reward_ci95": rhalf})


def _median_final(seeds: list, attr: str = "eval_accuracy") -> float:
    return float(np.median([getattr(ms[-1], attr) for ms in seeds]))


# suites


def _binary_group(k_prime: int, lam: float, dim: int = 16) -> Group:
    rolls = [make_rollout(0, VerdictSignals(1.0, 1.0), lam, tokens=[0, 6, 1, 2, 7, 3],
                          embedding=embed_tokens([100], dim))]
    for j in range(1, k_prime + 1):
        rolls.append(make_rollout(j, VerdictSignals(0.0, 1.0), lam, tokens=[0, 6, 1, 2, 8, 3],
                                  embedding=embed_tokens([100 + j], dim)))
    return Group(0, rolls, lam)


def signature_suite(cfg: EngineConfig, k_max: int = 7, n_groups: int = 10_000,
                    variances=(0.0, 0.005, 0.01, 0.02, 0.04, 0.08), gap: float = 1.0, seed: int = 0) -> ExperimentResult:
    """Binary signature buckets with OLS fits, plus the dispersion attenuation check."""
    res = ExperimentResult("signature")
    ks, anchors, negs = [], [], []
    for k in range(1, k_max + 1):
        c = cfg.replace(K=k, M=max(cfg.M, k), G=k + 1)
        g = _binary_group(k, c.lam)
        rep = shape_group(g, plan_subgroup(g, c), c)
        a = float(rep.raw[rep.anchor_index])
        n = float(np.mean(rep.raw[list(rep.negatives)]))
        ks.append(k)
        anchors.append(a)
        negs.append(n)
        res.aggregate.append({"k_prime": k, "mean_anchor_adv": a, "mean_neg_adv": n,
                              "theory_anchor": math.sqrt(k), "theory_neg": -1.0 / math.sqrt(k)})
    sa, ia, ra = ols(np.sqrt(ks), anchors)
    sn, inn, rn = ols(-1.0 / np.sqrt(ks), negs)
    res.fits = {"anchor_slope": sa, "anchor_intercept": ia, "anchor_r2": ra,
                "neg_slope": sn, "neg_intercept": inn, "neg_r2": rn}

    rng = np.random.default_rng(seed)
    emp, pred = [], []
    for k in range(1, k_max + 1):
        for var in variances:
            # negatives spread uniformly around 0 with the requested variance; anchor sits at `gap`
            w = math.sqrt(3.0 * var)
            R = np.empty((n_groups, k + 1))
            R[:, 0] = gap
            R[:, 1:] = rng.uniform(-w, w, (n_groups, k))
            Zs = K.zscore_rows(R, cfg.eps)
            e = float(Zs[:, 0].mean() / math.sqrt(k))
            p = attenuation(k, gap, var, cfg.signature_variant)
            emp.append(e)
            pred.append(p)
            res.per_seed.append({"k_prime": k, "var_neg": var, "empirical_alpha": e, "predicted_alpha": p})
    res.fits["pearson_r"] = pearson(emp, pred)
    res.summary = dict(res.fits)
    return res


def _default_sim(sim):
    return sim or SimConfig()


def suite_arms(suite: str, cfg: EngineConfig, sim: SimConfig) -> dict:
    """Arm definitions (name -> (engine config, sim config, algorithm)) for the training suites."""
    if suite == "rgr-cues":
        return {m: (cfg.replace(cue_mode=m), sim, "care") for m in ("repair_cue", "no_cue", "random")}
    if suite == "training-curves":
        return {"care": (cfg, sim, "care"), "care_no_rgr": (cfg.replace(reflection=False), sim, "care"),
                "grpo": (cfg, sim, "grpo")}
    if suite == "neg-scale":
        arms = {}
        for s in (1.0, 0.7, 0.5, 0.3):
            arms[f"s={s}"] = (cfg.replace(s=s, s_refl=min(cfg.s_refl, s)), sim, "care")
        return arms
    if suite == "rescue":
        return {"rescue_on": (cfg.replace(rescue=True), sim, "care"),
                "rescue_off": (cfg.replace(rescue=False), sim, "care")}
    if suite == "region-weights":
        return {w: (cfg.replace(weighting=w), sim, "care")
                for w in ("region", "uniform", "answer_only", "region_unmasked")}
    if suite == "k-equalization":
        arms = {}
        for k in (2, 4, 6):
            for eq in (True, False):
                arms[f"K={k},eq={'on' if eq else 'off'}"] = (cfg.replace(K=k, M=max(cfg.M, k), equalize=eq), sim, "care")
        return arms
    if suite == "anchor-rule":
        return {r: (cfg.replace(anchor_rule=r), sim, "care") for r in ("shortest", "random")}
    if suite == "srefl-sweep":
        return {f"s_refl={f}s": (cfg.replace(s_refl=cfg.s * f), sim, "care") for f in (0.25, 0.5, 0.75, 1.0)}
    raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")


def run_experiment(suite: str, cfg: EngineConfig | None = None, sim: SimConfig | None = None,
                   seeds: int = DEFAULT_SEEDS, steps: int | None = None, progress=None,
                   n_groups: int = 10_000) -> ExperimentResult:
    """Run one suite over ``seeds`` seeds and aggregate it."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    cfg = cfg or EngineConfig()
    if suite == "signature":
        return signature_suite(cfg, n_groups=n_groups, seed=cfg.seed)
    sim = _default_sim(sim)
    runs = _arms(suite_arms(suite, cfg, sim), seeds, steps, progress)
    res = ExperimentResult(suite, runs=runs)
    summarize = _SUMMARIES[suite]
    summarize(res, runs)
    return res


def _summ_curves(res, runs):
    _curve_rows(runs, res.per_seed, res.aggregate)
    finals = {k: _median_final(v) for k, v in runs.items()}
    res.summary = {f"median_final_{k}": v for k, v in finals.items()}
    if "grpo" in runs and "care" in runs:
        target = finals["grpo"]
        hit = [steps_to_reach(ms, target) for ms in runs["care"]]
        n_steps = len(runs["care"][0])
        med_hit = float(np.median([h if h is not None else math.inf for h in hit]))
        res.summary.update({"care_steps_to_grpo_final": med_hit, "steps": n_steps,
                            "care_step_fraction": med_hit / n_steps})


def _summ_rgr(res, runs):
    for name, seeds in runs.items():
        rates = []
        for seed, ms in enumerate(seeds):
            trig = sum(m.rgr_triggers for m in ms)
            ok = sum(m.rgr_successes for m in ms)
            rate = ok / trig if trig else float("nan")
            rates.append(rate)
            res.per_seed.append({"cue_mode": name, "seed": seed, "triggers": trig, "successes": ok,
                                 "success_rate": rate})
        mean, half = ci95(rates)
        res.aggregate.append({"cue_mode": name, "success_rate_mean": mean, "success_rate_ci95": half})
        res.summary[f"success_rate_{name}"] = mean


def _summ_neg_scale(res, runs, window: int = 10):
    base = runs["s=1.0"]
    for name, seeds in runs.items():
        vr = [windowed_variance_ratio(ms, window) for ms in seeds]
        clip = [[m.neg_answer_clip_rate for m in ms] for ms in seeds]
        for seed, (ratios, ms) in enumerate(zip(vr, seeds)):
            for w, r in enumerate(ratios):
                res.per_seed.append({"arm": name, "seed": seed, "window": w, "step": (w + 1) * window - 1,
                                     "variance_ratio": r})
        clip_vals = [c for cs in clip for c in cs if c is not None]
        res.summary[f"mean_neg_answer_clip_rate_{name}"] = float(np.mean(clip_vals)) if clip_vals else float("nan")
        if name == "s=1.0":
            continue
        deltas = []
        for seed, ratios in enumerate(vr):
            ref = windowed_variance_ratio(base[seed], window)
            for a, b in zip(ratios, ref):
                if a is not None and b is not None:
                    deltas.append(a - b)
        frac = float(np.mean(np.array(deltas) <= 0)) if deltas else float("nan")
        res.aggregate.append({"arm": name, "logged": len(deltas), "fraction_delta_le_0": frac,
                              "median_delta": float(np.median(deltas)) if deltas else float("nan")})
        res.summary[f"fraction_delta_le_0_{name}"] = frac


def _summ_rescue(res, runs):
    for name, seeds in runs.items():
        dacc, dkl = [], []
        for seed, ms in enumerate(seeds):
            for step_events in [rescue_events(ms)]:
                for a, k in step_events:
                    dacc.append(a)
                    dkl.append(k)
                    res.per_seed.append({"arm": name, "seed": seed, "dacc_at_b": a, "delta_kl": k})
        res.aggregate.append({"arm": name, "events": len(dacc),
                              "median_dacc_at_b": float(np.median(dacc)) if dacc else float("nan"),
                              "median_delta_kl": float(np.median(dkl)) if dkl else float("nan")})
        res.summary[f"median_dacc_{name}"] = res.aggregate[-1]["median_dacc_at_b"]
        res.summary[f"median_dkl_{name}"] = res.aggregate[-1]["median_delta_kl"]


def _summ_region(res, runs, grid_points: int = 20):
    _curve_rows(runs, res.per_seed, [])
    budget = min(ms[-1].cumulative_output_tokens for seeds in runs.values() for ms in seeds)
    grid = np.linspace(budget / grid_points, budget, grid_points)
    for name, seeds in runs.items():
        for T in grid:
            mean, half = ci95([accuracy_at_tokens(ms, T) for ms in seeds])
            res.aggregate.append({"arm": name, "tokens": float(T), "eval_accuracy_mean": mean,
                                  "eval_accuracy_ci95": half})
        res.summary[f"median_matched_{name}"] = float(np.median([accuracy_at_tokens(ms, budget) for ms in seeds]))
    res.summary["token_budget"] = float(budget)


def _summ_final_table(res, runs, extra=("expected_think_length",)):
    _curve_rows(runs, res.per_seed, [])
    for name, seeds in runs.items():
        row = {"arm": name}
        mean, half = ci95([ms[-1].eval_accuracy for ms in seeds])
        row.update(final_accuracy_mean=mean, final_accuracy_ci95=half,
                   final_accuracy_median=_median_final(seeds))
        for attr in extra:
            row[f"final_{attr}_median"] = _median_final(seeds, attr)
        trig = sum(m.rgr_triggers for ms in seeds for m in ms)
        gain = float(np.mean([ms[-1].eval_accuracy - ms[0].eval_accuracy for ms in seeds]))
        row["per_trigger_gain"] = gain / trig * len(seeds) if trig else float("nan")
        res.aggregate.append(row)
        res.summary[f"median_final_{name}"] = row["final_accuracy_median"]
        for attr in extra:
            res.summary[f"median_final_{attr}_{name}"] = row[f"final_{attr}_median"]
        res.summary[f"per_trigger_gain_{name}"] = row["per_trigger_gain"]


_SUMMARIES = {
    "training-curves": _summ_curves,
    "rgr-cues": _summ_rgr,
    "neg-scale": _summ_neg_scale,
    "rescue": _summ_rescue,
    "region-weights": _summ_region,
    "k-equalization": _summ_final_table,
    "anchor-rule": _summ_final_table,
    "srefl-sweep": _summ_final_table,
}
