"""Command-line entry point: ``care shape | simulate | experiment | signature-predict``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

from .advantage import predict_signature
from .config import (
    CONFIG_ENV_VAR,
    SIGNATURE_VARIANTS,
    EngineConfig,
    coerce_section,
    load_config_file,
    to_mapping,
    tomllib,
)
from .errors import CareError, ConfigError, DataError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this CLI reserves 2 for data errors
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_assignment(text: str):
    if "=" not in text:
        raise UsageError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key, parsed


def _resolve_config(args) -> tuple[dict, dict]:
    """File values (``--config`` or the env var), then ``--set`` / ``--sim-set`` and dedicated flags."""
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    sections = {"care": {}, "sim": {}}
    if path:
        try:
            sections = load_config_file(path)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError([f"{path}: {e}"]) from None
    care = dict(sections["care"])
    sim = dict(sections["sim"])
    for item in getattr(args, "set", None) or []:
        k, v = _parse_assignment(item)
        care[k] = v
    for item in getattr(args, "sim_set", None) or []:
        k, v = _parse_assignment(item)
        sim[k] = v
    for flag, key in (("seed", "seed"), ("beta", "beta"), ("s", "s"), ("s_refl", "s_refl"), ("K", "K"), ("G", "G")):
        v = getattr(args, flag, None)
        if v is not None:
            care[key] = v
    for flag, key in (("steps", "steps"), ("lr", "lr"), ("batch_groups", "batch_groups")):
        v = getattr(args, flag, None)
        if v is not None:
            sim[key] = v
    return care, sim


def _build_configs(care: dict, sim: dict):
    from .sim.trainer import SimConfig

    problems = []
    cfg = simcfg = None
    try:
        cfg = EngineConfig(**coerce_section(EngineConfig, care, "care"))
    except ConfigError as e:
        problems += e.violations
    except TypeError as e:
        problems.append(str(e))
    try:
        simcfg = SimConfig(**coerce_section(SimConfig, sim, "sim"))
    except ConfigError as e:
        problems += e.violations
    except TypeError as e:
        problems.append(str(e))
    if problems:
        raise ConfigError(problems)
    return cfg, simcfg


def cmd_shape(args) -> int:
    from .io import shape_stream

    care, _ = _resolve_config(args)
    cfg, _ = _build_configs(care, {})
    src = sys.stdin if args.input == "-" else open(args.input)
    dst = sys.stdout if args.output in (None, "-") else open(args.output, "w")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            written, skipped = shape_stream(src, dst, cfg, lenient=args.lenient)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    finally:
        if src is not sys.stdin:
            src.close()
        if dst is not sys.stdout:
            dst.close()
    print(f"shaped {written} group(s), skipped {skipped}", file=sys.stderr)
    return EXIT_OK


def _manifest(cfg, simcfg, algo: str, steps: int) -> dict:
    from .io import METRICS_SCHEMA_VERSION, version_string

    return {
        "algo": algo,
        "seed": cfg.seed,
        "steps": steps,
        "care": to_mapping(cfg),
        "sim": to_mapping(simcfg),
        "metrics_schema": METRICS_SCHEMA_VERSION,
        "version": version_string(),
    }


def cmd_simulate(args) -> int:
    from .io import metrics_csv, read_json, write_json
    from .sim.trainer import train

    if args.manifest:
        try:
            man = read_json(args.manifest)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read manifest {args.manifest}: {e}") from None
        care, sim = dict(man["care"]), dict(man["sim"])
        algo, steps = man["algo"], man["steps"]
    else:
        care, sim = _resolve_config(args)
        algo = args.algo
        steps = None
    cfg, simcfg = _build_configs(care, sim)
    steps = simcfg.steps if steps is None else int(steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = train(cfg, simcfg, algo=algo, steps=steps)
    (out / "metrics.csv").write_text(metrics_csv(metrics))
    write_json(_manifest(cfg, simcfg, algo, steps), out / "manifest.json")
    last = metrics[-1]
    print(f"{algo}: {steps} steps, final eval_accuracy={last.eval_accuracy:.4f} kl={last.kl:.4g} -> {out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .io import write_json, write_table
    from .sim.experiments import run_experiment

    care, sim = _resolve_config(args)
    cfg, simcfg = _build_configs(care, sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    res = run_experiment(args.suite, cfg, simcfg, seeds=args.seeds, steps=args.steps, progress=progress,
                         n_groups=args.n_groups)
    with open(out / "per_seed.csv", "w") as fh:
        write_table(res.per_seed, fh)
    with open(out / "aggregate.csv", "w") as fh:
        write_table(res.aggregate, fh)
    write_json({"suite": res.suite, "seeds": args.seeds, "fits": res.fits, "summary": _finite(res.summary),
                "care": to_mapping(cfg), "sim": to_mapping(simcfg)}, out / "summary.json")
    for k, v in res.summary.items():
        print(f"{k}\t{v}")
    return EXIT_OK


def _finite(d: dict) -> dict:
    import math

    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def cmd_signature_predict(args) -> int:
    try:
        a, n = predict_signature(args.k_prime, args.gap, args.var, args.variant)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(json.dumps({"k_prime": args.k_prime, "gap": args.gap, "var_neg": args.var, "variant": args.variant,
                      "anchor": a, "negative": n, "alpha": a / args.k_prime ** 0.5}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .sim.experiments import DEFAULT_SEEDS, SUITES

    p = _Parser(prog="care", description="Anchored subgroup advantage shaping tools.", allow_abbrev=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--config", help=f"TOML file with [care]/[sim] sections (default: ${CONFIG_ENV_VAR})")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override an engine setting")

    sp = sub.add_parser("shape", help="shape offline JSONL groups")
    sp.add_argument("input", help="JSONL file, or - for stdin")
    sp.add_argument("-o", "--output", help="output JSONL (default stdout)")
    sp.add_argument("--lenient", action="store_true", help="skip invalid records instead of failing")
    common(sp)
    sp.set_defaults(func=cmd_shape)

    def sim_flags(sp):
        common(sp)
        sp.add_argument("--sim-set", action="append", metavar="KEY=VALUE", help="override a simulator setting")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--s", type=float)
        sp.add_argument("--s-refl", dest="s_refl", type=float)
        sp.add_argument("--K", type=int)
        sp.add_argument("--G", type=int)
        sp.add_argument("--batch-groups", dest="batch_groups", type=int)

    sp = sub.add_parser("simulate", help="train on the synthetic task and write metrics")
    sp.add_argument("--algo", choices=("care", "grpo"), default="care")
    sp.add_argument("--out", default="run", help="output directory")
    sp.add_argument("--manifest", help="re-run exactly from a manifest.json")
    sim_flags(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("experiment", help="run a multi-seed experiment suite")
    sp.add_argument("suite", choices=SUITES)
    sp.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    sp.add_argument("--n-groups", dest="n_groups", type=int, default=10_000,
                    help="synthetic groups per cell (signature suite)")
    sp.add_argument("--out", default="experiment", help="output directory")
    sp.add_argument("-v", "--verbose", action="store_true")
    sim_flags(sp)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("signature-predict", help="predicted anchor/negative advantages of a two-level subgroup")
    sp.add_argument("--k-prime", dest="k_prime", type=int, required=True)
    sp.add_argument("--gap", type=float, default=1.0, help="anchor reward minus mean negative reward")
    sp.add_argument("--var", type=float, default=0.0, help="variance of negative rewards")
    sp.add_argument("--variant", choices=SIGNATURE_VARIANTS, default="k_var")
    sp.set_defaults(func=cmd_signature_predict)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print("configuration error:", file=sys.stderr)
        for v in e.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CareError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
