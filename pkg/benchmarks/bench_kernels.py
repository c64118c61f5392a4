"""Time the numba kernels against the numpy fallback on simulator-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import sys
import timeit

import numpy as np

from care._kernels import jit_impl, numpy_impl


def inputs(seed=0, N=32, L=3, V=10, max_fill=8, n_tokens=4000):
    rng = np.random.default_rng(seed)
    Z = rng.normal(0, 1, (3 * V * V, V))
    gates = rng.normal(0, 1, L)
    chains = (Z, gates, 1.0, rng.integers(0, V, N), rng.integers(0, 3, (N, L)), rng.integers(0, V, (N, L)),
              rng.random((N, L, max_fill)), rng.random((N, L)), max_fill)
    cs = rng.integers(0, Z.shape[0], n_tokens)
    cg = rng.integers(-1, L, n_tokens)
    act = rng.integers(0, V, n_tokens)
    act[(cg >= 0) & (rng.random(n_tokens) < 0.3)] = -1
    Zr, gr = Z + 0.1, gates + 0.1
    old = numpy_impl.token_logprob(Z, gates, 1.0, cs, cg, act) + rng.normal(0, 0.1, n_tokens)
    adv = rng.normal(0, 1, n_tokens)
    return {
        "sample_chains": chains,
        "token_logprob": (Z, gates, 1.0, cs, cg, act),
        "surrogate_loss_grad": (Z, gates, Zr, gr, 1.0, cs, cg, act, adv, old, 32, 0.2, 0.28, 0.02),
        "position_kl": (Z, gates, Zr, gr, 1.0, cs, cg),
        "zscore_rows": (rng.random((100_000, 5)), 1e-6),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if jit_impl is None:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    cases = inputs()
    print(f"{'kernel':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, a in cases.items():
        getattr(jit_impl, name)(*a)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: getattr(numpy_impl, name)(*a), number=1, repeat=args.repeat))
        t_jit = min(timeit.repeat(lambda: getattr(jit_impl, name)(*a), number=1, repeat=args.repeat))
        print(f"{name:<22}{t_np * 1e3:>12.3f}{t_jit * 1e3:>12.3f}{t_np / t_jit:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
