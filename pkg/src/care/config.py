"""Engine hyperparameters and config-file loading."""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, fields
from typing import Any, Mapping

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

CONFIG_ENV_VAR = "CARE_CONFIG"

WEIGHTINGS = ("region", "uniform", "answer_only", "region_unmasked")
ANCHOR_RULES = ("shortest", "random")
SELECTORS = ("nearest", "farthest", "mixed", "random")
CUE_MODES = ("repair_cue", "no_cue", "random")
SIGNATURE_VARIANTS = ("k_var", "k_plus_one_var")
PROXY_SCORES = ("sum", "mean")


@dataclass(frozen=True)
class EngineConfig:
    """All shaping hyperparameters.

    Defaults are the standard training setup (G=8, K=4, M=6, s=0.5,
    s_refl=s/2, delta=0.1, gamma_pos=0.005, asymmetric clip 0.20/0.28,
    beta=0.02). The switches below the
    ``seed`` field only exist for ablations.
    """

    G: int = 8
    K: int = 4
    M: int = 6
    s: float = 0.5
    s_refl: float = 0.25
    delta: float = 0.1
    gamma_pos: float = 0.005
    lam: float = 0.1
    eps: float = 1e-6
    eps_w: float = 1e-8
    clip_low: float = 0.20
    clip_high: float = 0.28
    beta: float = 0.02
    robust: bool = False
    trim_fraction: float = 0.1
    signature_variant: str = "k_var"
    seed: int = 0
    # ablation switches
    rescue: bool = True
    reflection: bool = True
    equalize: bool = True
    weighting: str = "region"
    anchor_rule: str = "shortest"
    selector: str = "nearest"
    proxy_score: str = "sum"
    cue_mode: str = "repair_cue"

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)


def _problems(cfg: EngineConfig) -> list[str]:
    p = []
    if cfg.G < 2:
        p.append(f"G must be >= 2 (got {cfg.G})")
    if cfg.K < 1:
        p.append(f"K must be >= 1 (got {cfg.K})")
    if cfg.M < cfg.K:
        p.append(f"M must be >= K (got M={cfg.M}, K={cfg.K})")
    if not 0.0 < cfg.s <= 1.0:
        p.append(f"s must lie in (0, 1] (got {cfg.s})")
    if not 0.0 < cfg.s_refl:
        p.append(f"s_refl must be > 0 (got {cfg.s_refl})")
    if cfg.s_refl > cfg.s:
        p.append(f"s_refl must be <= s (got s_refl={cfg.s_refl}, s={cfg.s})")
    if not cfg.delta > 0:
        p.append(f"delta must be > 0 (got {cfg.delta})")
    if cfg.gamma_pos < 0:
        p.append(f"gamma_pos must be >= 0 (got {cfg.gamma_pos})")
    if not 0.0 <= cfg.lam <= 1.0:
        p.append(f"lambda must lie in [0, 1] (got {cfg.lam})")
    if not cfg.eps > 0:
        p.append(f"eps must be > 0 (got {cfg.eps})")
    if not cfg.eps_w > 0:
        p.append(f"eps_w must be > 0 (got {cfg.eps_w})")
    if not cfg.clip_low > 0 or cfg.clip_low >= 1:
        p.append(f"clip_low must lie in (0, 1) (got {cfg.clip_low})")
    if not cfg.clip_high > 0:
        p.append(f"clip_high must be > 0 (got {cfg.clip_high})")
    if cfg.beta < 0:
        p.append(f"beta must be >= 0 (got {cfg.beta})")
    if not 0.0 <= cfg.trim_fraction < 0.5:
        p.append(f"trim_fraction must lie in [0, 0.5) (got {cfg.trim_fraction})")
    for name, allowed in (
        ("signature_variant", SIGNATURE_VARIANTS),
        ("weighting", WEIGHTINGS),
        ("anchor_rule", ANCHOR_RULES),
        ("selector", SELECTORS),
        ("proxy_score", PROXY_SCORES),
        ("cue_mode", CUE_MODES),
    ):
        value = getattr(cfg, name)
        if value not in allowed:
            p.append(f"{name} must be one of {', '.join(allowed)} (got {value!r})")
    return p


def validate(cfg: EngineConfig) -> None:
    problems = _problems(cfg)
    if problems:
        raise ConfigError(problems)


# config files spell the reward-mix weight "lambda"
_ALIASES = {"lambda": "lam"}


def _coerce(dc_type, raw: Mapping[str, Any], section: str) -> dict:
    known = {f.name: f for f in fields(dc_type)}
    out, unknown = {}, []
    for key, value in raw.items():
        name = _ALIASES.get(key, key)
        if name not in known:
            unknown.append(f"unknown key {section}.{key}")
            continue
        out[name] = value
    if unknown:
        raise ConfigError(unknown)
    return out


def engine_config_from_mapping(raw: Mapping[str, Any]) -> EngineConfig:
    return EngineConfig(**_coerce(EngineConfig, raw, "care"))


def load_config_file(path: str | os.PathLike) -> dict[str, dict]:
    """Read a TOML file and return its sections.

    Only ``[care]`` and ``[sim]`` are accepted; anything else is an error.
    """
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    bad = [f"unknown section [{k}]" for k in data if k not in ("care", "sim")]
    if bad:
        raise ConfigError(bad)
    return {"care": dict(data.get("care", {})), "sim": dict(data.get("sim", {}))}


def coerce_section(dc_type, raw: Mapping[str, Any], section: str) -> dict:
    return _coerce(dc_type, raw, section)


def to_mapping(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    if "lam" in d:
        d["lambda"] = d.pop("lam")
    return d


__all__ = [
    "EngineConfig",
    "validate",
    "engine_config_from_mapping",
    "load_config_file",
    "to_mapping",
    "CONFIG_ENV_VAR",
]
