"""Offline group records, shaping output, metrics tables and run manifests."""

from __future__ import annotations

import csv
import io
import json
import math
import subprocess
import warnings
from pathlib import Path
from typing import Iterable

import numpy as np

from .advantage import shape_group
from .config import EngineConfig
from .errors import CareError, DataError
from .objective import token_credit
from .rgr import ReplayResampler, run_reflection
from .rollout import Group, Rollout, Span, VerdictSignals, make_rollout
from .selector import plan_subgroup

METRICS_SCHEMA_VERSION = 1
EMBED_RENORM_TOL = 1e-3


def fmt_real(x) -> str:
    """Shortest decimal that round-trips to the same double."""
    return repr(float(x))


def _rollout_from_obj(obj: dict, lam: float, prompt_id, where: str) -> Rollout:
    try:
        verdict = VerdictSignals(float(obj["acc"]), float(obj.get("fmt", 1.0)))
        tokens = obj.get("tokens")
        think = answer = None
        if tokens is None:
            tl = int(obj.get("think_len", 0))
            al = int(obj.get("answer_len", 0))
            if tl < 0 or al < 0:
                raise DataError(f"{where}: span lengths must be >= 0")
            think, answer = Span(0, tl), Span(tl, tl + al)
        emb = obj.get("embedding")
        if emb is not None:
            emb = np.asarray(emb, dtype=np.float64)
            norm = float(np.linalg.norm(emb))
            if not norm > 0 or not math.isfinite(norm):
                raise DataError(f"{where}: embedding has zero or non-finite norm")
            if abs(norm - 1.0) > EMBED_RENORM_TOL:
                warnings.warn(f"{where}: embedding norm {norm:.6g} re-normalized", RuntimeWarning, stacklevel=3)
            emb = emb / norm
        old = obj.get("old_logprob")
        total = obj.get("old_logprob_total")
        return make_rollout(
            obj.get("id"), verdict, lam, tokens=tokens, think=think, answer=answer,
            old_logprob=old, ref_logprob=obj.get("ref_logprob"),
            old_logprob_total=None if total is None else float(total),
            embedding=emb, reflected=bool(obj.get("reflected", False)),
            reflection_failed=bool(obj.get("reflection_failed", False)), prompt_id=prompt_id,
        )
    except KeyError as e:
        raise DataError(f"{where}: missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"{where}: {e}") from None


def parse_record(obj: dict, cfg: EngineConfig, line: int | None = None):
    """Build ``(group, reflection or None)`` from one decoded record."""
    if not isinstance(obj, dict):
        raise DataError("record must be a JSON object", line)
    if "rollouts" not in obj or not isinstance(obj["rollouts"], list):
        raise DataError("missing rollouts list", line)
    lam = float(obj.get("lambda", cfg.lam))
    pid = obj.get("prompt_id")
    try:
        rolls = [_rollout_from_obj(r, lam, pid, f"rollout {i}") for i, r in enumerate(obj["rollouts"])]
        group = Group(pid, rolls, lam)
        refl = obj.get("reflection")
        reflection = _rollout_from_obj(refl, lam, pid, "reflection") if refl is not None else None
    except CareError as e:
        raise DataError(str(e), line) from None
    return group, reflection


def shape_record(group: Group, cfg: EngineConfig, reflection: Rollout | None = None) -> dict:
    """Plan, optionally reflect (replaying a supplied resample), shape and credit one group."""
    plan = plan_subgroup(group, cfg, np.random.default_rng(cfg.seed))
    members = None
    outcome_obj = None
    if reflection is not None:
        aug, members, outcome = run_reflection(group, plan, cfg, ReplayResampler({group.prompt_id: reflection}))
        if outcome.triggered:
            group = aug
            outcome_obj = {"result": outcome.result, "target_index": outcome.target_index, "cue_used": outcome.cue_used}
        else:
            members = None
    rep = shape_group(group, plan, cfg, members)
    rollouts = []
    for i, r in enumerate(group.rollouts):
        entry = {"index": i, "id": r.id, "reward": r.reward, "raw": float(rep.raw[i]), "final": float(rep.final[i]),
                 "scale": float(rep.applied_scale[i])}
        tc = token_credit(r, float(rep.final[i]), cfg.gamma_pos, cfg.eps_w, cfg.weighting)
        entry["weight_sum"] = tc.weight_sum
        if r.tokens is not None:
            entry["weights"] = tc.weights.tolist()
            entry["token_advantages"] = tc.advantages.tolist()
        rollouts.append(entry)
    return {
        "prompt_id": group.prompt_id,
        "plan": {
            "anchor_kind": plan.anchor_kind,
            "anchor_index": plan.anchor_index,
            "negative_indices": list(plan.negative_indices),
            "k_target": plan.k_target,
            "k_realized": plan.k_realized,
            "skip": plan.skip,
        },
        "reflection": outcome_obj,
        "report": {
            "mode": rep.mode,
            "mu": rep.mu,
            "sigma": rep.sigma,
            "equalization": rep.equalization,
            "k_s": rep.k_s,
            "members": list(rep.members),
        },
        "rollouts": rollouts,
    }


def shape_stream(lines: Iterable[str], out, cfg: EngineConfig, lenient: bool = False) -> tuple[int, int]:
    """Shape every record in ``lines`` and write one JSON line each to ``out``.

    Returns ``(written, skipped)``. Without ``lenient`` the first bad
    record raises :class:`DataError` naming its line.
    """
    written = skipped = 0
    for n, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as e:
                raise DataError(f"malformed JSON ({e.msg})", n) from None
            group, refl = parse_record(obj, cfg, n)
            rec = shape_record(group, cfg, refl)
        except CareError as e:
            if not lenient:
                if isinstance(e, DataError) and e.line is not None:
                    raise
                raise DataError(str(e), n) from None
            skipped += 1
            continue
        out.write(json.dumps(rec, allow_nan=False) + "\n")
        written += 1
    if skipped:
        warnings.warn(f"skipped {skipped} invalid record(s)", RuntimeWarning, stacklevel=2)
    return written, skipped


# metrics tables


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_real(v)
    return str(v)


def write_table(rows: list[dict], fh, columns: list[str] | None = None) -> None:
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])


def metrics_rows(metrics) -> list[dict]:
    from .sim.trainer import CSV_FIELDS

    rows = []
    for m in metrics:
        row = {k: getattr(m, k) for k in CSV_FIELDS}
        row["buckets"] = ";".join(f"{k}:{fmt_real(a)}:{fmt_real(n)}:{c}" for k, (a, n, c) in m.buckets.items())
        rows.append(row)
    return rows


def metrics_csv(metrics) -> str:
    from .sim.trainer import CSV_FIELDS

    buf = io.StringIO()
    write_table(metrics_rows(metrics), buf, list(CSV_FIELDS) + ["buckets"])
    return buf.getvalue()


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# manifests


def version_string() -> str:
    """``git describe``-style version of the checkout, falling back to the package version."""
    from . import __version__

    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
