"""Rollout/group data model, span parsing, reward mixing, rationale embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ConfigError, MalformedRolloutError

# Sentinel token ids shared by every token stream in the package.
THINK_OPEN = 0
THINK_CLOSE = 1
ANS_OPEN = 2
ANS_CLOSE = 3
MARKERS = (THINK_OPEN, THINK_CLOSE, ANS_OPEN, ANS_CLOSE)

DEFAULT_EMBED_DIM = 256
_HASH_MULT = 2654435761  # Knuth multiplicative hash; odd, so a bijection mod 2**k


@dataclass(frozen=True)
class Span:
    """Half-open token range ``[start, end)``."""

    start: int = 0
    end: int = 0

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise MalformedRolloutError(f"invalid span [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start

    def overlaps(self, other: "Span") -> bool:
        return len(self) > 0 and len(other) > 0 and self.start < other.end and other.start < self.end


EMPTY_SPAN = Span(0, 0)


@dataclass(frozen=True)
class VerdictSignals:
    acc: float
    fmt: float

    def __post_init__(self):
        for name in ("acc", "fmt"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MalformedRolloutError(f"{name} must lie in [0, 1] (got {v})")


def mix_reward(verdict: VerdictSignals, lam: float) -> float:
    """``(1 - lam) * acc + lam * fmt``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1] (got {lam})")
    return (1.0 - lam) * verdict.acc + lam * verdict.fmt


@dataclass(frozen=True, eq=False)
class Rollout:
    """One sampled response.

    ``tokens`` may be ``None`` for offline records that only carry span
    lengths; in that case ``length`` is taken from the spans. ``reward``
    is set once, by :func:`make_rollout`, and never recomputed.
    ``trace`` is an opaque slot for producers (the simulator stores the
    policy states behind each token there).
    """

    id: Any
    think: Span
    answer: Span
    verdict: VerdictSignals
    reward: float
    tokens: Optional[np.ndarray] = None
    old_logprob: Optional[np.ndarray] = None
    ref_logprob: Optional[np.ndarray] = None
    old_logprob_total: float = 0.0
    embedding: Optional[np.ndarray] = None
    reflected: bool = False
    reflection_failed: bool = False
    prompt_id: Any = None
    trace: Any = field(default=None, repr=False)

    @property
    def length(self) -> int:
        if self.tokens is not None:
            return int(len(self.tokens))
        return max(self.think.end, self.answer.end)

    @property
    def think_len(self) -> int:
        return len(self.think)

    @property
    def answer_len(self) -> int:
        return len(self.answer)

    @property
    def acc(self) -> float:
        return self.verdict.acc

    @property
    def is_positive(self) -> bool:
        return self.verdict.acc == 1.0


def _check_rollout(r: Rollout) -> None:
    n = r.length
    for name, sp in (("think", r.think), ("answer", r.answer)):
        if sp.end > n:
            raise MalformedRolloutError(f"{name} span [{sp.start}, {sp.end}) exceeds length {n}")
    if r.think.overlaps(r.answer):
        raise MalformedRolloutError("think and answer spans overlap")
    if r.reflection_failed and not r.reflected:
        raise MalformedRolloutError("reflection_failed requires reflected")
    if r.embedding is not None:
        norm = float(np.linalg.norm(r.embedding))
        if abs(norm - 1.0) > 1e-6:
            raise MalformedRolloutError(f"embedding norm {norm} is not 1")
    for name in ("old_logprob", "ref_logprob"):
        arr = getattr(r, name)
        if arr is not None and r.tokens is not None and len(arr) != n:
            raise MalformedRolloutError(f"{name} has {len(arr)} entries for {n} tokens")


def make_rollout(
    id,
    verdict: VerdictSignals,
    lam: float,
    *,
    tokens=None,
    think: Span | None = None,
    answer: Span | None = None,
    old_logprob=None,
    ref_logprob=None,
    old_logprob_total: float | None = None,
    embedding=None,
    reflected: bool = False,
    reflection_failed: bool = False,
    prompt_id=None,
    trace=None,
) -> Rollout:
    """Build a validated :class:`Rollout`.

    Spans default to what :func:`parse_spans` finds in ``tokens``.
    """
    if tokens is not None:
        tokens = np.asarray(tokens, dtype=np.int64)
        if think is None or answer is None:
            t, a = parse_spans(tokens)
            think = t if think is None else think
            answer = a if answer is None else answer
    think = think if think is not None else EMPTY_SPAN
    answer = answer if answer is not None else EMPTY_SPAN
    if old_logprob is not None:
        old_logprob = np.asarray(old_logprob, dtype=np.float64)
        if old_logprob_total is None:
            old_logprob_total = float(old_logprob.sum())
    if ref_logprob is not None:
        ref_logprob = np.asarray(ref_logprob, dtype=np.float64)
    if embedding is not None:
        embedding = np.asarray(embedding, dtype=np.float64)
    r = Rollout(
        id=id,
        think=think,
        answer=answer,
        verdict=verdict,
        reward=mix_reward(verdict, lam),
        tokens=tokens,
        old_logprob=old_logprob,
        ref_logprob=ref_logprob,
        old_logprob_total=0.0 if old_logprob_total is None else float(old_logprob_total),
        embedding=embedding,
        reflected=reflected,
        reflection_failed=reflection_failed,
        prompt_id=prompt_id,
        trace=trace,
    )
    _check_rollout(r)
    return r


@dataclass(frozen=True, eq=False)
class Group:
    prompt_id: Any
    rollouts: tuple
    lam: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "rollouts", tuple(self.rollouts))
        flagged = sum(r.reflected for r in self.rollouts)
        if flagged > 1:
            raise MalformedRolloutError("a group holds at most one reflected rollout")
        for r in self.rollouts:
            if r.prompt_id is not None and r.prompt_id != self.prompt_id:
                raise MalformedRolloutError(
                    f"rollout {r.id} belongs to prompt {r.prompt_id}, not {self.prompt_id}"
                )

    def __len__(self):
        return len(self.rollouts)

    def __getitem__(self, i) -> Rollout:
        return self.rollouts[i]

    def __iter__(self):
        return iter(self.rollouts)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts], dtype=np.float64)

    @property
    def acc(self) -> np.ndarray:
        return np.array([r.verdict.acc for r in self.rollouts], dtype=np.float64)

    def positives(self) -> list[int]:
        return [i for i, r in enumerate(self.rollouts) if r.verdict.acc == 1.0]

    def failures(self) -> list[int]:
        return [i for i, r in enumerate(self.rollouts) if r.verdict.acc == 0.0]

    def augmented(self, extra: Rollout) -> "Group":
        return Group(self.prompt_id, self.rollouts + (extra,), self.lam)


def parse_spans(tokens: Sequence[int]) -> tuple[Span, Span]:
    """Locate the think and answer spans inside marker tokens.

    Each span covers the tokens strictly between its open and close
    marker. A missing pair gives ``Span(0, 0)``. Repeated, unbalanced,
    crossed or nested markers raise :class:`MalformedRolloutError`.
    """
    pos = {m: [] for m in MARKERS}
    for i, t in enumerate(np.asarray(tokens).tolist()):
        if t in pos:
            pos[t].append(i)
    spans = []
    for open_, close in ((THINK_OPEN, THINK_CLOSE), (ANS_OPEN, ANS_CLOSE)):
        o, c = pos[open_], pos[close]
        if len(o) > 1 or len(c) > 1:
            raise MalformedRolloutError("repeated span markers")
        if len(o) != len(c):
            raise MalformedRolloutError("unbalanced span markers")
        if not o:
            spans.append(None)
            continue
        if c[0] < o[0]:
            raise MalformedRolloutError("close marker precedes open marker")
        spans.append((o[0], c[0]))
    think, answer = spans
    if think is not None and answer is not None:
        (to, tc), (ao, ac) = think, answer
        disjoint = tc < ao or ac < to
        if not disjoint:
            raise MalformedRolloutError("crossed or nested think/answer markers")
    return (
        Span(think[0] + 1, think[1]) if think else EMPTY_SPAN,
        Span(answer[0] + 1, answer[1]) if answer else EMPTY_SPAN,
    )


def render_markers(think_tokens: Sequence[int], answer_tokens: Sequence[int] | None) -> np.ndarray:
    """Inverse of :func:`parse_spans`; ``answer_tokens=None`` omits the answer markers."""
    out = [THINK_OPEN, *think_tokens, THINK_CLOSE]
    if answer_tokens is not None:
        out += [ANS_OPEN, *answer_tokens, ANS_CLOSE]
    return np.asarray(out, dtype=np.int64)


def token_bucket(token, dim: int):
    return (np.asarray(token, dtype=np.uint64) * np.uint64(_HASH_MULT)) % np.uint64(2**32) % np.uint64(dim)


def embed_tokens(think_tokens, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Hashed bag-of-tokens vector, l2-normalized.

    An empty input maps to the basis vector at bucket 0.
    """
    if dim <= 0:
        raise ConfigError(f"embedding dimension must be positive (got {dim})")
    vec = np.zeros(dim, dtype=np.float64)
    toks = np.asarray(think_tokens, dtype=np.int64)
    if toks.size == 0:
        vec[0] = 1.0
        return vec
    np.add.at(vec, token_bucket(toks, dim).astype(np.int64), 1.0)
    return vec / np.linalg.norm(vec)


def embed_rationale(rollout: Rollout, dim: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    if rollout.tokens is None:
        return embed_tokens((), dim)
    return embed_tokens(rollout.tokens[rollout.think.start : rollout.think.end], dim)


def normalize_embedding(vec) -> tuple[np.ndarray, float]:
    """Return the unit vector and the input norm."""
    v = np.asarray(vec, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise MalformedRolloutError("embedding has zero or non-finite norm")
    return v / n, n
