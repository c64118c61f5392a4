import numpy as np
import pytest

from care.config import EngineConfig
from care.rollout import Group, Span, VerdictSignals, make_rollout


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def build_group(accs, *, think=None, answer=None, embeddings=None, totals=None, fmts=None, lam=0.1,
                prompt_id="p0", dim=8, seed=0, reflected=None, failed=None):
    """Group from per-rollout verdicts; random unit embeddings unless given."""
    n = len(accs)
    rng = np.random.default_rng(seed)
    think = think if think is not None else [5] * n
    answer = answer if answer is not None else [1] * n
    rolls = []
    for i, acc in enumerate(accs):
        emb = unit(embeddings[i]) if embeddings is not None else unit(rng.normal(size=dim))
        tl, al = think[i], answer[i]
        rolls.append(make_rollout(
            i, VerdictSignals(float(acc), 1.0 if fmts is None else float(fmts[i])), lam,
            think=Span(0, tl), answer=Span(tl, tl + al), embedding=emb,
            old_logprob_total=None if totals is None else totals[i], prompt_id=prompt_id,
            reflected=bool(reflected[i]) if reflected is not None else False,
            reflection_failed=bool(failed[i]) if failed is not None else False,
        ))
    return Group(prompt_id, rolls, lam)


@pytest.fixture
def cfg():
    return EngineConfig()


@pytest.fixture
def exact_cfg():
    # eps small enough that binary subgroups hit the closed-form values to 1e-9
    return EngineConfig(eps=1e-12, eps_w=1e-15)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
