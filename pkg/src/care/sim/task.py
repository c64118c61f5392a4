"""Modular-arithmetic chain prompts and their verifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OP_ADD, OP_MUL, OP_SUB = 0, 1, 2
N_OPS = 3

# Token ids beyond the four span markers.
FILLER = 4
NULL = 5
VALUE_BASE = 6


def apply_op(op: int, operand: int, value: int, V: int) -> int:
    if op == OP_ADD:
        return (value + operand) % V
    if op == OP_MUL:
        return (value * operand) % V
    return (value - operand) % V


@dataclass(frozen=True)
class SyntheticTask:
    """Start value ``x0`` followed by ``L`` (op, operand) pairs, all mod ``V``."""

    x0: int
    ops: tuple
    operands: tuple
    V: int = 10

    def __post_init__(self):
        if len(self.ops) != len(self.operands) or not self.ops:
            raise ValueError("ops and operands must be equally long and non-empty")
        if self.V < 2:
            raise ValueError("V must be >= 2")

    @property
    def L(self) -> int:
        return len(self.ops)

    @property
    def features(self) -> tuple:
        return (self.x0,) + tuple(self.ops) + tuple(self.operands)

    def intermediates(self) -> np.ndarray:
        """Correct value after each operation; the last entry is the answer."""
        out = np.empty(self.L, np.int64)
        v = self.x0
        for k, (op, c) in enumerate(zip(self.ops, self.operands)):
            v = apply_op(op, c, v, self.V)
            out[k] = v
        return out

    @property
    def answer(self) -> int:
        return int(self.intermediates()[-1])

    def verify(self, answer_tokens) -> tuple[float, float]:
        """``(acc, fmt)`` for the tokens inside the answer span.

        Format holds when the span holds exactly one value token; accuracy
        additionally needs that value to be the ground truth.
        """
        toks = list(answer_tokens)
        fmt = float(len(toks) == 1 and toks[0] >= VALUE_BASE and toks[0] - VALUE_BASE < self.V)
        acc = float(fmt == 1.0 and toks[0] - VALUE_BASE == self.answer)
        return acc, fmt


class TaskDistribution:
    """Uniform prompts over start values, ops and operands."""

    def __init__(self, L: int = 3, V: int = 10):
        if L < 1 or V < 2:
            raise ValueError("need L >= 1 and V >= 2")
        self.L = L
        self.V = V

    def sample_arrays(self, rng: np.random.Generator, n: int):
        x0 = rng.integers(0, self.V, n)
        ops = rng.integers(0, N_OPS, (n, self.L))
        operands = rng.integers(0, self.V, (n, self.L))
        return x0, ops, operands

    def sample(self, rng: np.random.Generator, n: int) -> list[SyntheticTask]:
        x0, ops, opr = self.sample_arrays(rng, n)
        return [SyntheticTask(int(x0[i]), tuple(int(o) for o in ops[i]), tuple(int(c) for c in opr[i]), self.V)
                for i in range(n)]

    def eval_set(self, n: int, seed: int = 12345) -> list[SyntheticTask]:
        return self.sample(np.random.default_rng(seed), n)


def stack_tasks(tasks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x0 = np.array([t.x0 for t in tasks], np.int64)
    ops = np.array([t.ops for t in tasks], np.int64)
    opr = np.array([t.operands for t in tasks], np.int64)
    return x0, ops, opr
