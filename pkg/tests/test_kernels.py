import os
import subprocess
import sys

import numpy as np
import pytest

from care import _kernels
from care._kernels import jit_impl, numpy_impl

from gradcheck import random_instance, relative_gradient_error

needs_jit = pytest.mark.skipif(jit_impl is None, reason="numba not available")
IMPLS = [numpy_impl] + ([jit_impl] if jit_impl is not None else [])


def _chain_inputs(seed, N=64, L=3, V=10, max_fill=8):
    rng = np.random.default_rng(seed)
    Z = rng.normal(0, 1, (3 * V * V, V))
    gates = rng.normal(0, 1, L)
    x0 = rng.integers(0, V, N)
    opc = rng.integers(0, 3, (N, L))
    opr = rng.integers(0, V, (N, L))
    return Z, gates, x0, opc, opr, rng.random((N, L, max_fill)), rng.random((N, L)), max_fill


@needs_jit
def test_sample_chains_parity():
    args = _chain_inputs(0)
    Z, gates, x0, opc, opr, ug, uv, mf = args
    a = numpy_impl.sample_chains(Z, gates, 0.8, x0, opc, opr, ug, uv, mf)
    b = jit_impl.sample_chains(Z, gates, 0.8, x0, opc, opr, ug, uv, mf)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


@needs_jit
def test_logprob_kl_and_loss_parity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        inst = random_instance(rng)
        keys = ("Z", "gates", "inv_temp", "ctx_state", "ctx_gate", "action")
        lp_a = numpy_impl.token_logprob(*(inst[k] for k in keys))
        lp_b = jit_impl.token_logprob(*(inst[k] for k in keys))
        np.testing.assert_allclose(lp_a, lp_b, rtol=1e-12, atol=1e-12)
        kl_keys = ("Z", "gates", "Zr", "gates_r", "inv_temp", "ctx_state", "ctx_gate")
        assert numpy_impl.position_kl(*(inst[k] for k in kl_keys)) == pytest.approx(
            jit_impl.position_kl(*(inst[k] for k in kl_keys)), rel=1e-12, abs=1e-15)
        ra = numpy_impl.surrogate_loss_grad(**inst)
        rb = jit_impl.surrogate_loss_grad(**inst)
        for x, y in zip(ra, rb):
            np.testing.assert_allclose(x, y, rtol=1e-11, atol=1e-13)


@needs_jit
def test_zscore_rows_parity():
    R = np.random.default_rng(2).random((100, 6))
    np.testing.assert_allclose(numpy_impl.zscore_rows(R, 1e-6), jit_impl.zscore_rows(R, 1e-6), rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("impl", IMPLS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_gradient_matches_finite_differences(impl):
    rng = np.random.default_rng(3)
    errs = [relative_gradient_error(impl, random_instance(rng)) for _ in range(10)]
    assert max(errs) <= 1e-5


def test_position_kl_zero_at_reference():
    inst = random_instance(np.random.default_rng(4))
    kl = numpy_impl.position_kl(inst["Z"], inst["gates"], inst["Z"], inst["gates"], inst["inv_temp"],
                                inst["ctx_state"], inst["ctx_gate"])
    assert abs(kl) < 1e-14


def test_sampled_logprobs_are_normalized():
    # summing the probability of every gate/value action at a gated position gives 1
    rng = np.random.default_rng(5)
    Z, gates = rng.normal(size=(4, 5)), rng.normal(size=2)
    cs = np.repeat(np.arange(4), 6)
    cg = np.tile([0] * 6, 4)
    act = np.tile([-1, 0, 1, 2, 3, 4], 4)
    p = np.exp(numpy_impl.token_logprob(Z, gates, 1.0, cs, cg, act)).reshape(4, 6).sum(axis=1)
    np.testing.assert_allclose(p, 1.0, atol=1e-12)


def test_env_var_selects_numpy_backend():
    env = dict(os.environ, CARE_DISABLE_JIT="1")
    out = subprocess.run([sys.executable, "-c", "from care import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    assert _kernels.BACKEND in ("numpy", "numba")


@needs_jit
def test_training_run_identical_across_backends(tmp_path):
    outs = []
    for flag in ("0", "1"):
        out = tmp_path / f"jit{flag}"
        env = dict(os.environ, CARE_DISABLE_JIT=flag)
        subprocess.run([sys.executable, "-m", "care.cli", "simulate", "--steps", "10", "--sim-set", "eval_prompts=32",
                        "--out", str(out)], env=env, check=True, capture_output=True)
        outs.append((out / "metrics.csv").read_text().splitlines())
    a, b = outs
    assert a[0] == b[0] and len(a) == len(b)
    for ra, rb in zip(a[1:], b[1:]):
        for x, y in zip(ra.split(","), rb.split(",")):
            try:
                assert float(x) == pytest.approx(float(y), rel=1e-9, abs=1e-12)
            except ValueError:
                assert x == y
