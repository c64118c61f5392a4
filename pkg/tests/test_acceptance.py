"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line; the lines are printed together at
the end of the pytest run (see ``conftest.py``). Run this file directly
to execute only the acceptance suite.
"""

import math
import time

import numpy as np
import pytest

from care.advantage import grpo_advantages, shape_group
from care.config import EngineConfig
from care.objective import diagnostics
from care.sim import SimConfig
from care.sim.experiments import run_experiment, signature_suite
from care.selector import plan_subgroup
from care import _kernels
from care._kernels import numpy_impl

from conftest import build_group
from gradcheck import random_instance, relative_gradient_error

RESULTS: list = []
SEEDS = 5


def verdict(name: str, ok: bool, detail: str):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_binary_signature():
    t0 = time.perf_counter()
    cfg = EngineConfig(eps=1e-12)
    worst = 0.0
    for k in range(1, 8):
        g = build_group([1] + [0] * k, fmts=[1] * (k + 1), seed=k)
        c = cfg.replace(K=k, M=max(6, k), G=k + 1)
        rep = shape_group(g, plan_subgroup(g, c), c)
        worst = max(worst, abs(rep.raw[0] - math.sqrt(k)), *np.abs(rep.raw[1:] + 1 / math.sqrt(k)))
    fits = signature_suite(cfg, n_groups=1).fits
    elapsed = time.perf_counter() - t0
    ok = (worst <= 1e-9 and abs(fits["anchor_slope"] - 1) <= 5e-4 and abs(fits["anchor_intercept"]) <= 5e-4
          and fits["anchor_r2"] >= 1 - 1e-6 and elapsed < 1.0)
    verdict("binary sqrt(K') signature", ok,
            f"max |err| {worst:.2e}, slope {fits['anchor_slope']:.6f}, intercept {fits['anchor_intercept']:.2e}, "
            f"R2 {fits['anchor_r2']:.9f}, {elapsed:.2f}s")


def test_rescue_equivalence():
    t0 = time.perf_counter()
    worst = 0.0
    for delta in (0.01, 0.1, 1.0):
        cfg = EngineConfig(eps=1e-12, delta=delta)
        for k in range(1, 8):
            totals = [-1.0] + [-2.0 - j for j in range(k)]
            c = cfg.replace(K=k, M=max(6, k), G=k + 1)
            g = build_group([0] * (k + 1), totals=totals, seed=k)
            rep = shape_group(g, plan_subgroup(g, c), c)
            assert rep.mode == "rescue"
            worst = max(worst, abs(rep.raw[0] - math.sqrt(k)), *np.abs(rep.raw[1:] + 1 / math.sqrt(k)))
    elapsed = time.perf_counter() - t0
    verdict("rescue equivalence", worst <= 1e-9 and elapsed < 1.0, f"max |err| {worst:.2e} over delta in {{0.01, 0.1, 1}}, {elapsed:.2f}s")


def test_attenuation_law():
    t0 = time.perf_counter()
    r = signature_suite(EngineConfig(), n_groups=100_000).fits["pearson_r"]
    elapsed = time.perf_counter() - t0
    verdict("attenuation law", r >= 0.99 and elapsed < 30, f"Pearson r {r:.4f} (need >= 0.99), {elapsed:.1f}s")


def _exact_quartering() -> float:
    rng = np.random.default_rng(0)
    reports = {0.5: [], 0.25: []}
    for b in range(32):
        k = int(rng.integers(1, 8))
        accs = [1] + [0] * k + list(rng.integers(0, 2, int(rng.integers(0, 3))))
        g = build_group(accs, fmts=rng.integers(0, 2, len(accs)), seed=b)
        for s in reports:
            cfg = EngineConfig(s=s, s_refl=s / 2)
            reports[s].append(shape_group(g, plan_subgroup(g, cfg), cfg))
    _, full = diagnostics(reports[0.5])
    _, half = diagnostics(reports[0.25])
    return abs(half / full - 0.25)


@pytest.mark.slow
def test_negative_only_scaling():
    t0 = time.perf_counter()
    err = _exact_quartering()
    res = run_experiment("neg-scale", EngineConfig(), SimConfig(), seeds=SEEDS)
    fr = {s: res.summary[f"fraction_delta_le_0_s={s}"] for s in (0.7, 0.5, 0.3)}
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-12 and all(v >= 0.9 for v in fr.values()) and elapsed < 300
    verdict("negative-only scaling", ok,
            f"quartering |err| {err:.1e}; fraction of logged windows with delta <= 0: "
            + ", ".join(f"s={s}: {v:.3f}" for s, v in fr.items()) + f"; {elapsed:.0f}s")


def test_equalization():
    ratios = {}
    for k_s in (1, 2, 3):
        g = build_group([1] + [0] * k_s, seed=k_s)
        on = EngineConfig(K=4)
        off = on.replace(equalize=False)
        a = shape_group(g, plan_subgroup(g, on), on).final
        b = shape_group(g, plan_subgroup(g, off), off).final
        ratios[k_s] = np.linalg.norm(a) / np.linalg.norm(b)
    err = max(abs(ratios[k] - math.sqrt(4 / k)) for k in ratios)
    verdict("equalization", err <= 1e-12,
            ", ".join(f"K_S={k}: {v:.12f}" for k, v in ratios.items()) + f" (max |err| {err:.1e})")


def test_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    impl = _kernels.jit_impl if _kernels.USING_JIT else numpy_impl
    errs = [relative_gradient_error(impl, random_instance(rng)) for _ in range(100)]
    elapsed = time.perf_counter() - t0
    verdict("gradient check", max(errs) <= 1e-5 and elapsed < 10,
            f"max relative error {max(errs):.2e} over 100 instances ({_kernels.BACKEND}), {elapsed:.1f}s")


def test_grpo_reduction():
    rng = np.random.default_rng(5)
    worst = 0.0
    for b in range(200):
        G = int(rng.integers(2, 10))
        accs = [0] * G
        accs[int(rng.integers(G))] = 1
        fmts = rng.integers(0, 2, G)
        fmts[accs.index(1)] = 1
        cfg = EngineConfig(G=G, K=G - 1, M=max(6, G - 1), s=1.0, s_refl=1.0, weighting="uniform",
                           rescue=False, reflection=False)
        g = build_group(accs, fmts=fmts, seed=b)
        plan = plan_subgroup(g, cfg)
        assert sorted(plan.members) == list(range(G))
        rep = shape_group(g, plan, cfg)
        worst = max(worst, float(np.max(np.abs(rep.raw - grpo_advantages(g.rewards, cfg.eps)))))
    verdict("GRPO reduction", worst <= 1e-9, f"max |raw - group z-score| {worst:.1e} over 200 groups")


@pytest.mark.slow
def test_training_dynamics_ordering():
    t0 = time.perf_counter()
    s = run_experiment("training-curves", EngineConfig(), SimConfig(), seeds=SEEDS).summary
    care, no_rgr, grpo = s["median_final_care"], s["median_final_care_no_rgr"], s["median_final_grpo"]
    frac = s["care_step_fraction"]
    elapsed = time.perf_counter() - t0
    ok = care >= no_rgr >= grpo and frac <= 0.75 and elapsed < 600
    verdict("training-dynamics ordering", ok,
            f"median final acc CARE {care:.4f} >= no-RGR {no_rgr:.4f} >= GRPO {grpo:.4f}; "
            f"CARE reaches GRPO final at {frac:.1%} of steps; {elapsed:.0f}s")


@pytest.mark.slow
def test_rgr_cue_effect():
    s = run_experiment("rgr-cues", EngineConfig(), SimConfig(), seeds=SEEDS).summary
    cue, plain, rnd = s["success_rate_repair_cue"], s["success_rate_no_cue"], s["success_rate_random"]
    gap = cue - max(plain, rnd)
    verdict("RGR cue effect", gap >= 0.20,
            f"success repair_cue {cue:.3f}, no_cue {plain:.3f}, random {rnd:.3f} (gap {gap * 100:.1f}pp)")


@pytest.mark.slow
def test_rescue_effect():
    s = run_experiment("rescue", EngineConfig(), SimConfig(), seeds=SEEDS).summary
    kl_on, kl_off = s["median_dkl_rescue_on"], s["median_dkl_rescue_off"]
    acc_on, acc_off = s["median_dacc_rescue_on"], s["median_dacc_rescue_off"]
    verdict("rescue effect", kl_on > kl_off and acc_on > acc_off,
            f"median dKL on {kl_on:.2e} vs off {kl_off:.2e}; median dAcc@50 on {acc_on:.4f} vs off {acc_off:.4f}")


@pytest.mark.slow
def test_region_weighting():
    s = run_experiment("region-weights", EngineConfig(), SimConfig(), seeds=SEEDS).summary
    reg, uni = s["median_matched_region"], s["median_matched_uniform"]
    ans, unm = s["median_matched_answer_only"], s["median_matched_region_unmasked"]
    ok = reg >= uni and reg >= ans and unm < reg
    verdict("region weighting", ok,
            f"matched-token acc region {reg:.4f}, uniform {uni:.4f}, answer-only {ans:.4f}, "
            f"unmasked {unm:.4f} (budget {s['token_budget']:.0f} tokens)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
