"""Tabular softmax policy over skill states, plus chain encoding helpers.

A skill state is ``(op, operand, previous value)``; every emitted value,
think or answer, is drawn from the row of the table for its state, so
what the policy learns on answers transfers to the same skill inside
the rationale. Each think step first emits a run of filler tokens
controlled by one shared gate per step (capped at ``max_fill``); the
answer step has an abstain gate that emits a null token instead of a
value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels as K
from ..rollout import ANS_CLOSE, ANS_OPEN, THINK_CLOSE, THINK_OPEN, embed_tokens
from .task import FILLER, N_OPS, NULL, VALUE_BASE


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p):
    return float(np.log(p) - np.log1p(-p))


@dataclass
class ChainTrace:
    """Per-token policy context for one rollout.

    ``pos`` are the positions of policy actions in the token stream; the
    remaining tokens are span markers. ``action == -1`` is a gate firing
    (filler or abstain); ``ctx_gate == -1`` a value emitted after the
    filler cap.
    """

    pos: np.ndarray
    ctx_state: np.ndarray
    ctx_gate: np.ndarray
    action: np.ndarray
    values: np.ndarray
    fills: np.ndarray


class ToyPolicy:
    def __init__(self, Z, gates, V: int, temperature: float = 1.0):
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.Z = np.ascontiguousarray(Z, dtype=np.float64)
        self.gates = np.ascontiguousarray(gates, dtype=np.float64)
        self.V = int(V)
        self.temperature = float(temperature)
        if self.Z.shape != (N_OPS * self.V * self.V, self.V):
            raise ValueError(f"table shape {self.Z.shape} does not match V={V}")

    @classmethod
    def initial(cls, rng: np.random.Generator, L: int, V: int, *, skill_low=0.0, skill_high=3.0,
                noise=0.5, fill_prob=0.7, abstain_prob=0.05, temperature=1.0) -> "ToyPolicy":
        """Random partial competence: each skill's correct value gets a bonus logit."""
        n_states = N_OPS * V * V
        Z = rng.normal(0.0, noise, (n_states, V))
        s = np.arange(n_states)
        op, rest = np.divmod(s, V * V)
        opr, prev = np.divmod(rest, V)
        correct = np.where(op == 0, (prev + opr) % V, np.where(op == 1, (prev * opr) % V, (prev - opr) % V))
        Z[s, correct] += rng.uniform(skill_low, skill_high, n_states)
        gates = np.full(L, _logit(fill_prob))
        gates[-1] = _logit(abstain_prob)
        return cls(Z, gates, V, temperature)

    @property
    def inv_temp(self) -> float:
        return 1.0 / self.temperature

    @property
    def L(self) -> int:
        return len(self.gates)

    def snapshot(self) -> "ToyPolicy":
        return ToyPolicy(self.Z.copy(), self.gates.copy(), self.V, self.temperature)

    def state_index(self, op, operand, prev):
        return (np.asarray(op) * self.V + np.asarray(operand)) * self.V + np.asarray(prev)

    def probs(self, state) -> np.ndarray:
        z = self.Z[state] * self.inv_temp
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def mean_abs_param(self) -> float:
        return float((np.abs(self.Z).sum() + np.abs(self.gates).sum()) / (self.Z.size + self.gates.size))

    # sampling

    def sample(self, x0, ops, operands, rng: np.random.Generator, max_fill: int, gates=None):
        """Draw one chain per prompt row; returns ``(values, fills, states)``."""
        x0 = np.ascontiguousarray(x0, np.int64)
        ops = np.ascontiguousarray(ops, np.int64)
        operands = np.ascontiguousarray(operands, np.int64)
        n, L = ops.shape
        u_gate = rng.random((n, L, max(max_fill, 1)))
        u_val = rng.random((n, L))
        g = self.gates if gates is None else np.ascontiguousarray(gates)
        values, fills, states, _, _ = K.sample_chains(self.Z, g, self.inv_temp, x0, ops, operands,
                                                      u_gate, u_val, max_fill)
        return values, fills, states

    def continue_chain(self, x0, ops, operands, values, fills, start: int, rng, max_fill: int):
        """Keep steps before ``start`` and resample the rest from the policy."""
        L = len(ops)
        values = np.array(values, np.int64)
        fills = np.array(fills, np.int64)
        if start >= L:
            return values, fills
        prev = x0 if start == 0 else values[start - 1]
        sub_v, sub_f, _ = self.sample(np.array([prev]), np.array([ops[start:]]), np.array([operands[start:]]),
                                      rng, max_fill, gates=self.gates[start:])
        values[start:] = sub_v[0]
        fills[start:] = sub_f[0]
        return values, fills

    # scoring

    def logprob(self, trace: ChainTrace) -> np.ndarray:
        return K.token_logprob(self.Z, self.gates, self.inv_temp, trace.ctx_state, trace.ctx_gate, trace.action)

    def exact_accuracy(self, x0, ops, operands, answers) -> float:
        """Probability that a sampled chain ends in the right answer, averaged over prompts."""
        x0 = np.asarray(x0)
        n, L = np.asarray(ops).shape
        p = np.zeros((n, self.V))
        p[np.arange(n), x0] = 1.0
        prev = np.arange(self.V)
        for k in range(L):
            st = self.state_index(np.asarray(ops)[:, k, None], np.asarray(operands)[:, k, None], prev[None, :])
            T = self.probs(st)  # (n, V prev, V next)
            p = np.einsum("nv,nvw->nw", p, T)
        proceed = 1.0 - _sigmoid(self.gates[-1] * self.inv_temp)
        return float((proceed * p[np.arange(n), np.asarray(answers)]).mean())

    def expected_think_length(self, max_fill: int) -> float:
        """Expected number of tokens inside the think span."""
        total = 0.0
        for g in self.gates[:-1]:
            q = _sigmoid(g * self.inv_temp)
            total += float(sum(q ** j for j in range(1, max_fill + 1))) + 1.0
        return total


def encode_chain(policy: ToyPolicy, x0: int, ops, operands, values, fills, max_fill: int):
    """Token stream and per-token policy context for one sampled chain."""
    V = policy.V
    L = len(ops)
    tokens = [THINK_OPEN]
    pos, cs, cg, act = [], [], [], []
    prev = int(x0)
    for k in range(L):
        s = int((ops[k] * V + operands[k]) * V + prev)
        if k == L - 1:
            tokens += [THINK_CLOSE, ANS_OPEN]
            pos.append(len(tokens))
            cs.append(s)
            cg.append(k)
            if values[k] < 0:
                tokens.append(NULL)
                act.append(-1)
            else:
                tokens.append(VALUE_BASE + int(values[k]))
                act.append(int(values[k]))
            tokens.append(ANS_CLOSE)
            break
        f = int(fills[k])
        for _ in range(f):
            pos.append(len(tokens))
            tokens.append(FILLER)
            cs.append(s)
            cg.append(k)
            act.append(-1)
        pos.append(len(tokens))
        tokens.append(VALUE_BASE + int(values[k]))
        cs.append(s)
        cg.append(k if f < max_fill else -1)
        act.append(int(values[k]))
        prev = int(values[k])
    trace = ChainTrace(np.array(pos, np.int64), np.array(cs, np.int64), np.array(cg, np.int64),
                       np.array(act, np.int64), np.array(values, np.int64), np.array(fills, np.int64))
    return np.array(tokens, np.int64), trace


def rationale_embedding(values, V: int, dim: int) -> np.ndarray:
    """Embed the think values tagged by their step, so shared prefixes look alike."""
    think = np.asarray(values[:-1], np.int64)
    tagged = 1000 + np.arange(len(think)) * (V + 1) + think
    return embed_tokens(tagged, dim)
