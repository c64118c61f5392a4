"""Simulated RLVR training loops: the shaped pipeline and a group z-score baseline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import _kernels as K
from ..advantage import NORMAL, RESCUE, grpo_advantages, shape_group
from ..config import EngineConfig
from ..errors import ContractViolation, DivergenceError
from ..objective import token_credit, variance_ratio
from ..rgr import ResampleRequest, run_reflection
from ..rollout import Group, Rollout, VerdictSignals, make_rollout, parse_spans
from ..selector import VERIFIED, plan_subgroup
from .policy import ChainTrace, ToyPolicy, encode_chain, rationale_embedding
from .task import SyntheticTask, TaskDistribution, stack_tasks

ALGOS = ("care", "grpo")


@dataclass(frozen=True)
class SimConfig:
    """Simulator knobs (task, policy initialisation, optimiser, repair model)."""

    L: int = 3
    V: int = 10
    batch_groups: int = 4
    steps: int = 300
    lr: float = 3.0
    ppo_epochs: int = 4
    temperature: float = 1.0
    max_fill: int = 8
    fill_prob: float = 0.7
    abstain_prob: float = 0.05
    skill_low: float = 0.0
    skill_high: float = 3.0
    init_noise: float = 0.5
    p_fix: float = 0.75
    eval_prompts: int = 256
    eval_seed: int = 12345
    divergence_bound: float = 50.0
    embed_dim: int = 64
    baseline_clip_low: float = 0.2
    baseline_clip_high: float = 0.2

    def __post_init__(self):
        from ..errors import ConfigError

        p = []
        for name in ("L", "batch_groups", "steps", "ppo_epochs", "eval_prompts", "embed_dim"):
            if getattr(self, name) < 1:
                p.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.V < 2:
            p.append(f"V must be >= 2 (got {self.V})")
        if self.max_fill < 0:
            p.append(f"max_fill must be >= 0 (got {self.max_fill})")
        for name in ("fill_prob", "abstain_prob", "p_fix"):
            v = getattr(self, name)
            lo_ok = v > 0 if name != "p_fix" else v >= 0
            hi_ok = v < 1 if name != "p_fix" else v <= 1
            if not (lo_ok and hi_ok):
                p.append(f"{name} out of range (got {v})")
        for name in ("lr", "temperature", "divergence_bound", "baseline_clip_low", "baseline_clip_high"):
            if not getattr(self, name) > 0:
                p.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if self.skill_high < self.skill_low:
            p.append("skill_high must be >= skill_low")
        if p:
            raise ConfigError(p)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    accuracy: float
    kl: float
    loss: float
    neg_answer_clip_rate: Optional[float]
    variance_ratio: Optional[float]
    rescue_triggered: bool
    rgr_triggered: bool
    rgr_success: bool
    cumulative_output_tokens: int
    mean_think_length: float
    eval_accuracy: float = 0.0
    expected_think_length: float = 0.0
    delta_kl: float = 0.0
    delta_kl_allneg: Optional[float] = None
    allneg_groups: int = 0
    rgr_triggers: int = 0
    rgr_successes: int = 0
    n_credited: int = 0
    # K' -> (mean anchor raw advantage, mean negative raw advantage, count)
    buckets: dict = field(default_factory=dict)
    # raw per-group values for the variance-ratio diagnostics
    anchor_finals: list = field(default_factory=list, repr=False)
    neg_finals: list = field(default_factory=list, repr=False)


CSV_FIELDS = (
    "step", "mean_reward", "accuracy", "eval_accuracy", "kl", "loss", "neg_answer_clip_rate",
    "variance_ratio", "rescue_triggered", "rgr_triggered", "rgr_success", "rgr_triggers",
    "rgr_successes", "allneg_groups", "n_credited", "cumulative_output_tokens",
    "mean_think_length", "expected_think_length", "delta_kl", "delta_kl_allneg",
)


class _Sim:
    """Shared state of one training run."""

    def __init__(self, cfg: EngineConfig, sim: SimConfig, tasks: TaskDistribution | None):
        self.cfg = cfg
        self.sim = sim
        self.tasks = tasks or TaskDistribution(sim.L, sim.V)
        if self.tasks.L != sim.L or self.tasks.V != sim.V:
            raise ContractViolation("task distribution does not match the simulator shape")
        ss = np.random.SeedSequence(cfg.seed)
        init_ss, sample_ss, aux_ss = ss.spawn(3)
        self.policy = ToyPolicy.initial(
            np.random.default_rng(init_ss), sim.L, sim.V, skill_low=sim.skill_low, skill_high=sim.skill_high,
            noise=sim.init_noise, fill_prob=sim.fill_prob, abstain_prob=sim.abstain_prob,
            temperature=sim.temperature,
        )
        self.ref = self.policy.snapshot()
        self.rng = np.random.default_rng(sample_ss)
        self.aux = np.random.default_rng(aux_ss)
        ev = self.tasks.eval_set(sim.eval_prompts, sim.eval_seed)
        self.eval_arrays = stack_tasks(ev)
        self.eval_answers = np.array([t.answer for t in ev], np.int64)
        self.cum_tokens = 0

    def eval_accuracy(self) -> float:
        return self.policy.exact_accuracy(*self.eval_arrays, self.eval_answers)

    def build_rollouts(self, task: SyntheticTask, values, fills, ids, prompt_id, **flags) -> list[Rollout]:
        """Score and package sampled chains under the current (old) and reference tables."""
        sim = self.sim
        encoded = [encode_chain(self.policy, task.x0, task.ops, task.operands, values[i], fills[i], sim.max_fill)
                   for i in range(len(values))]
        traces = [tr for _, tr in encoded]
        cs = np.concatenate([t.ctx_state for t in traces])
        cg = np.concatenate([t.ctx_gate for t in traces])
        act = np.concatenate([t.action for t in traces])
        it = self.policy.inv_temp
        old = K.token_logprob(self.policy.Z, self.policy.gates, it, cs, cg, act)
        ref = K.token_logprob(self.ref.Z, self.ref.gates, it, cs, cg, act)
        out, o = [], 0
        for (tokens, tr), rid in zip(encoded, ids):
            n = len(tr.pos)
            olp = np.zeros(len(tokens))
            rlp = np.zeros(len(tokens))
            olp[tr.pos] = old[o:o + n]
            rlp[tr.pos] = ref[o:o + n]
            o += n
            think, answer = parse_spans(tokens)
            acc, fmt = task.verify(tokens[answer.start:answer.end])
            out.append(make_rollout(
                rid, VerdictSignals(acc, fmt), self.cfg.lam, tokens=tokens, think=think, answer=answer,
                old_logprob=olp, ref_logprob=rlp,
                embedding=rationale_embedding(tr.values, sim.V, sim.embed_dim),
                prompt_id=prompt_id, trace=tr, **flags,
            ))
        return out

    def sample_batch(self):
        """B prompts with G rollouts each; the sampling stream is shared by both algorithms."""
        sim, G = self.sim, self.cfg.G
        x0, ops, opr = self.tasks.sample_arrays(self.rng, sim.batch_groups)
        values, fills, _ = self.policy.sample(np.repeat(x0, G), np.repeat(ops, G, axis=0),
                                              np.repeat(opr, G, axis=0), self.rng, sim.max_fill)
        groups, tasks = [], []
        for b in range(sim.batch_groups):
            task = SyntheticTask(int(x0[b]), tuple(int(v) for v in ops[b]), tuple(int(v) for v in opr[b]), sim.V)
            sl = slice(b * G, (b + 1) * G)
            rolls = self.build_rollouts(task, values[sl], fills[sl], range(G), b)
            groups.append(Group(b, rolls, self.cfg.lam))
            tasks.append(task)
        return groups, tasks

    def resampler(self, task: SyntheticTask, new_id: int) -> Callable[[ResampleRequest], Rollout]:
        """Synthetic repair model behind the reflection step."""
        sim = self.sim

        def call(req: ResampleRequest) -> Rollout:
            x0, ops, opr = task.x0, np.array(task.ops), np.array(task.operands)
            if req.target is None:
                v, f, _ = self.policy.sample(np.array([x0]), ops[None], opr[None], self.aux, sim.max_fill)
                values, fills = v[0], f[0]
            else:
                tr: ChainTrace = req.target.trace
                truth = task.intermediates()
                wrong = np.nonzero(tr.values != truth)[0]
                first = int(wrong[0]) if wrong.size else sim.L - 1
                if req.cue_flag:
                    if self.aux.random() < sim.p_fix:
                        values = tr.values.copy()
                        values[first:] = truth[first:]
                        fills = tr.fills.copy()
                    else:
                        values, fills = self.policy.continue_chain(x0, ops, opr, tr.values, tr.fills, first,
                                                                   self.aux, sim.max_fill)
                else:
                    cut = int(self.aux.integers(0, sim.L))
                    values, fills = self.policy.continue_chain(x0, ops, opr, tr.values, tr.fills, cut,
                                                               self.aux, sim.max_fill)
            return self.build_rollouts(task, [values], [fills], [new_id], req.prompt_id)[0]

        return call

    def update(self, credited, clip_low, clip_high):
        """PPO epochs on the flat token list; returns (loss, clipped mask of the last epoch)."""
        sim, cfg = self.sim, self.cfg
        if not credited:
            return 0.0, np.zeros(0, bool)
        cs = np.concatenate([c[0] for c in credited])
        cg = np.concatenate([c[1] for c in credited])
        act = np.concatenate([c[2] for c in credited])
        adv = np.concatenate([c[3] for c in credited])
        old = np.concatenate([c[4] for c in credited])
        n_credit = len(credited)
        it = self.policy.inv_temp
        lr = self.step_size()
        first_loss = None
        clipped = np.zeros(len(act), bool)
        for _ in range(sim.ppo_epochs):
            loss_pg, kl, gZ, gG, clipped = K.surrogate_loss_grad(
                self.policy.Z, self.policy.gates, self.ref.Z, self.ref.gates, it, cs, cg, act, adv, old,
                n_credit, clip_low, clip_high, cfg.beta)
            if first_loss is None:
                first_loss = float(loss_pg + cfg.beta * kl)
            self.policy.Z -= lr * gZ
            self.policy.gates -= lr * gG
        self.check_divergence()
        return first_loss, np.asarray(clipped)

    def step_size(self) -> float:
        """``lr``, capped at ``1 / (beta * inv_temp**2)``.

        The KL term has curvature up to about ``beta * inv_temp**2``, so
        larger steps oscillate around the reference instead of settling.
        """
        if self.cfg.beta <= 0:
            return self.sim.lr
        return min(self.sim.lr, 1.0 / (self.cfg.beta * self.policy.inv_temp ** 2))

    def check_divergence(self):
        m = self.policy.mean_abs_param()
        if not np.isfinite(m) or m > self.sim.divergence_bound:
            raise DivergenceError(
                f"mean |logit| = {m:.4g} exceeds the bound {self.sim.divergence_bound}; "
                f"lower lr (now {self.sim.lr}) or raise beta (now {self.cfg.beta})")


def _positions(groups):
    cs = [r.trace.ctx_state for g in groups for r in g.rollouts]
    cg = [r.trace.ctx_gate for g in groups for r in g.rollouts]
    if not cs:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(cs), np.concatenate(cg)


def _credit_entry(r: Rollout, adv_seq: float, cfg: EngineConfig, mode: str):
    tc = token_credit(r, adv_seq, cfg.gamma_pos, cfg.eps_w, mode)
    tr: ChainTrace = r.trace
    neg_ans = np.zeros(len(tr.pos), bool)
    if adv_seq < 0:
        neg_ans = (tr.pos >= r.answer.start) & (tr.pos < r.answer.end)
    return (tr.ctx_state, tr.ctx_gate, tr.action, tc.advantages[tr.pos], r.old_logprob[tr.pos], neg_ans)


def _two_level(rewards) -> bool:
    return len(np.unique(rewards)) == 2


def _run(cfg: EngineConfig, sim: SimConfig, steps: int | None, algo: str, tasks, callback=None):
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}")
    steps = sim.steps if steps is None else steps
    if steps < 1:
        raise ValueError("steps must be >= 1")
    st = _Sim(cfg, sim, tasks)
    out: list[StepMetrics] = []
    it = st.policy.inv_temp
    for step in range(steps):
        groups, task_list = st.sample_batch()
        kl_now = K.position_kl(st.policy.Z, st.policy.gates, st.ref.Z, st.ref.gates, it, *_positions(groups))
        credited, anchor_finals, neg_finals = [], [], []
        buckets: dict = {}
        rescue = rgr_any = rgr_ok = False
        n_trig = n_ok = 0
        decoded = [g for g in groups]
        allneg = [g for g in groups if not g.positives()]
        for b, (g, task) in enumerate(zip(groups, task_list)):
            if algo == "grpo":
                adv = grpo_advantages(g.rewards, cfg.eps)
                for i, r in enumerate(g.rollouts):
                    if adv[i] != 0.0:
                        credited.append(_credit_entry(r, float(adv[i]), cfg, "uniform"))
                continue
            plan = plan_subgroup(g, cfg, st.aux)
            aug, members, outcome = run_reflection(g, plan, cfg, st.resampler(task, len(g)))
            if outcome.triggered:
                rgr_any = True
                n_trig += 1
                decoded.append(Group(g.prompt_id, (outcome.reflected_rollout,), g.lam))
                if outcome.result == "success_replaced":
                    rgr_ok = True
                    n_ok += 1
            rep = shape_group(aug, plan, cfg, members if outcome.triggered else None)
            if rep.mode == RESCUE:
                rescue = True
            if rep.mode in (NORMAL, RESCUE):
                anchor_finals.append(float(rep.final[rep.anchor_index]))
                neg_finals.extend(float(rep.final[i]) for i in rep.negatives)
            if plan.anchor_kind == VERIFIED and not plan.skipped and _two_level(g.rewards[list(plan.members)]):
                # signature buckets use the subgroup as selected, before reflection
                base = shape_group(g, plan, cfg) if outcome.triggered else rep
                k = plan.k_realized
                a_sum, n_sum, c = buckets.get(k, (0.0, 0.0, 0))
                buckets[k] = (a_sum + float(base.raw[plan.anchor_index]),
                              n_sum + float(np.mean(base.raw[list(plan.negative_indices)])), c + 1)
            for i, r in enumerate(aug.rollouts):
                if rep.final[i] != 0.0:
                    credited.append(_credit_entry(r, float(rep.final[i]), cfg, cfg.weighting))

        pre = st.policy.snapshot()
        if algo == "grpo":
            cl, ch = sim.baseline_clip_low, sim.baseline_clip_high
        else:
            cl, ch = cfg.clip_low, cfg.clip_high
        loss, clipped = st.update(credited, cl, ch)
        neg_mask = np.concatenate([c[5] for c in credited]) if credited else np.zeros(0, bool)
        clip_rate = float(clipped[neg_mask].mean()) if neg_mask.any() else None

        pos = _positions(groups)
        dkl = K.position_kl(st.policy.Z, st.policy.gates, pre.Z, pre.gates, it, *pos)
        dkl_allneg = None
        if allneg:
            dkl_allneg = K.position_kl(st.policy.Z, st.policy.gates, pre.Z, pre.gates, it, *_positions(allneg))

        rolls = [r for g in groups for r in g.rollouts]
        st.cum_tokens += sum(r.length for g in decoded for r in g.rollouts)
        m = StepMetrics(
            step=step,
            mean_reward=float(np.mean([r.reward for r in rolls])),
            accuracy=float(np.mean([r.verdict.acc for r in rolls])),
            kl=float(kl_now),
            loss=float(loss),
            neg_answer_clip_rate=clip_rate,
            variance_ratio=variance_ratio(neg_finals, anchor_finals),
            rescue_triggered=rescue,
            rgr_triggered=rgr_any,
            rgr_success=rgr_ok,
            cumulative_output_tokens=int(st.cum_tokens),
            mean_think_length=float(np.mean([r.think_len for r in rolls])),
            eval_accuracy=st.eval_accuracy(),
            expected_think_length=st.policy.expected_think_length(sim.max_fill),
            delta_kl=float(dkl),
            delta_kl_allneg=None if dkl_allneg is None else float(dkl_allneg),
            allneg_groups=len(allneg),
            rgr_triggers=n_trig,
            rgr_successes=n_ok,
            n_credited=len(credited),
            buckets={k: (a / c, n / c, c) for k, (a, n, c) in sorted(buckets.items())},
            anchor_finals=anchor_finals,
            neg_finals=neg_finals,
        )
        out.append(m)
        if callback is not None:
            callback(m)
    return out


def train_care(cfg: EngineConfig, sim: SimConfig | None = None, steps: int | None = None,
               tasks: TaskDistribution | None = None, callback=None) -> list[StepMetrics]:
    """Run the shaped pipeline for ``steps`` steps and return per-step metrics."""
    return _run(cfg, sim or SimConfig(), steps, "care", tasks, callback)


def train_grpo_baseline(cfg: EngineConfig, sim: SimConfig | None = None, steps: int | None = None,
                        tasks: TaskDistribution | None = None, callback=None) -> list[StepMetrics]:
    """Group z-score baseline with token-uniform credit and no subgrouping."""
    return _run(cfg, sim or SimConfig(), steps, "grpo", tasks, callback)


def train(cfg: EngineConfig, sim: SimConfig | None = None, algo: str = "care", steps: int | None = None,
          tasks=None, callback=None) -> list[StepMetrics]:
    return _run(cfg, sim or SimConfig(), steps, algo, tasks, callback)


def sample_group(task: SyntheticTask, policy: ToyPolicy, cfg: EngineConfig, seed: int,
                 sim: SimConfig | None = None, ref: ToyPolicy | None = None) -> Group:
    """Draw ``cfg.G`` independent rollouts for one prompt."""
    if cfg.G < 2:
        raise ContractViolation("a group needs G >= 2")
    sim = sim or SimConfig(L=task.L, V=task.V)
    st = _Sim.__new__(_Sim)
    st.cfg, st.sim = cfg, sim
    st.policy = policy
    st.ref = ref if ref is not None else policy
    rng = np.random.default_rng(seed)
    G = cfg.G
    ops = np.array(task.ops)[None].repeat(G, 0)
    opr = np.array(task.operands)[None].repeat(G, 0)
    values, fills, _ = policy.sample(np.full(G, task.x0), ops, opr, rng, sim.max_fill)
    return Group(0, st.build_rollouts(task, values, fills, range(G), 0), cfg.lam)
