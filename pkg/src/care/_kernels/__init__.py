"""Hot kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``CARE_DISABLE_JIT`` is unset or ``0``. Both implementations
stay importable as ``numpy_impl`` and ``jit_impl`` (``None`` without
numba) so tests and benchmarks can compare them directly.
"""

import os

from . import _numpy as numpy_impl

JIT_ENV_VAR = "CARE_DISABLE_JIT"

try:
    from . import _jit as jit_impl
except ImportError:  # pragma: no cover
    jit_impl = None


def jit_requested() -> bool:
    return os.environ.get(JIT_ENV_VAR, "0").strip().lower() in ("", "0", "false", "no")


USING_JIT = jit_impl is not None and jit_requested()
_impl = jit_impl if USING_JIT else numpy_impl

zscore_rows = _impl.zscore_rows
sample_chains = _impl.sample_chains
token_logprob = _impl.token_logprob
surrogate_loss_grad = _impl.surrogate_loss_grad
position_kl = _impl.position_kl

BACKEND = "numba" if USING_JIT else "numpy"

__all__ = [
    "BACKEND",
    "USING_JIT",
    "numpy_impl",
    "jit_impl",
    "zscore_rows",
    "sample_chains",
    "token_logprob",
    "surrogate_loss_grad",
    "position_kl",
]
