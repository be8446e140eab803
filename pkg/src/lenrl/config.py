"""Run configuration: a strict, flat key=value format with typed keys.

Every key is registered with a parser, a formatter, and a default; unknown
keys, type mismatches, and constraint violations all raise ``ConfigError``
naming the key. Absent keys take their defaults and are echoed back when the
resolved config is written, so a run directory always carries the complete
configuration and ``parse_config(dump_config(cfg)) == cfg``.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

from .envs import ARITHMETIC_CHAIN, GAUSSIAN_WALK, REWARD_BINARY, REWARD_GAUSSIAN, EnvConfig
from .errors import ConfigError
from .objectives import NORM_SAMPLE_AVG, NORM_TOKEN_AVG, TIS_SEQUENCE, TIS_TOKEN, SurrogateConfig
from .policy import INIT_NEAR_TARGET, INIT_UNIFORM
from .shaping import ACC_EMA, ACC_PER_BATCH, METHOD_NONE, METHODS, ShapingConfig

ADV_GROUP_NORM = "group_norm"
ADV_RLOO = "rloo"


@dataclass(frozen=True)
class TrainConfig:
    """Fully resolved training configuration.

    ``cap`` (and the dependent ``shaping.max_len`` / ``env.gw.bin_width``)
    may be None, meaning "resolve automatically at run start".
    """

    seed: int = 0
    steps: int = 50
    group_size: int = 16  # config key: G
    problems_per_batch: int = 8
    train_problems: int = 32
    eval_problems: int = 16
    cap: int | None = None
    pilot_rollouts: int = 1000
    pilot_cap: int = 256
    lr: float = 0.01
    policy_init: str = INIT_UNIFORM
    init_stop_hazard: float = 0.05
    init_drift_bias: float = 3.0
    bucket_size: int = 1
    eval_every: int = 10
    eval_samples: int = 16
    eval_temperature: float = 1.0
    advantage: str = ADV_GROUP_NORM
    env: EnvConfig = field(default_factory=EnvConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    shaping: ShapingConfig = field(default_factory=ShapingConfig)


# --- value parsers / formatters ------------------------------------------


def _parse_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"expected an integer, got {raw!r}")


def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValueError(f"expected a number, got {raw!r}")


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {raw!r}")


def _enum(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"expected one of {options}, got {raw!r}")
        return raw

    return parse


def _auto_or(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(raw: str):
        return None if raw == "auto" else parse(raw)

    return inner


def _off_or(parse: Callable[[str], object]) -> Callable[[str], object]:
    def inner(raw: str):
        return None if raw == "off" else parse(raw)

    return inner


def _parse_float_list(raw: str) -> tuple[float, ...]:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(_parse_float(p) for p in parts)


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_off(value) -> str:
    return "off" if value is None else repr(float(value))


@dataclass(frozen=True)
class _Key:
    name: str
    parse: Callable[[str], object]
    default: object
    check: Callable[[object], str | None] = lambda v: None
    fmt: Callable[[object], str] = _fmt


def _ge(bound, label):
    return lambda v: None if v is None or v >= bound else f"must be >= {label}"


def _gt(bound, label):
    return lambda v: None if v is None or v > bound else f"must be > {label}"


def _in_open01(v):
    return None if 0.0 < v < 1.0 else "must be in (0, 1)"


def _in_closed01(v):
    return None if 0.0 <= v <= 1.0 else "must be in [0, 1]"


_DEF = TrainConfig()

KEYS: tuple[_Key, ...] = (
    _Key("seed", _parse_int, _DEF.seed, _ge(0, "0")),
    _Key("steps", _parse_int, _DEF.steps, _ge(1, "1")),
    _Key("G", _parse_int, _DEF.group_size, _ge(2, "2 (group math needs at least two samples)")),
    _Key("problems_per_batch", _parse_int, _DEF.problems_per_batch, _ge(1, "1")),
    _Key("train_problems", _parse_int, _DEF.train_problems, _ge(1, "1")),
    _Key("eval_problems", _parse_int, _DEF.eval_problems, _ge(1, "1")),
    _Key("cap", _auto_or(_parse_int), _DEF.cap, _ge(1, "1")),
    _Key("pilot_rollouts", _parse_int, _DEF.pilot_rollouts, _ge(1, "1")),
    _Key("pilot_cap", _parse_int, _DEF.pilot_cap, _ge(1, "1")),
    _Key("lr", _parse_float, _DEF.lr, _ge(0.0, "0")),
    _Key("policy_init", _enum(INIT_UNIFORM, INIT_NEAR_TARGET), _DEF.policy_init),
    _Key("init_stop_hazard", _parse_float, _DEF.init_stop_hazard, _in_open01),
    _Key("init_drift_bias", _parse_float, _DEF.init_drift_bias),
    _Key("bucket_size", _parse_int, _DEF.bucket_size, _ge(1, "1")),
    _Key("eval_every", _parse_int, _DEF.eval_every, _ge(1, "1")),
    _Key("eval_samples", _parse_int, _DEF.eval_samples, _ge(2, "2 (dispersion metrics need several samples)")),
    _Key("eval_temperature", _parse_float, _DEF.eval_temperature, _gt(0.0, "0")),
    _Key("advantage", _enum(ADV_GROUP_NORM, ADV_RLOO), _DEF.advantage),
    _Key("env.kind", _enum(GAUSSIAN_WALK, ARITHMETIC_CHAIN), _DEF.env.kind),
    _Key("env.reward", _enum(REWARD_BINARY, REWARD_GAUSSIAN), _DEF.env.reward),
    _Key("env.gw.mu0", _parse_float, _DEF.env.gw_mu0),
    _Key("env.gw.mu_r", _parse_float, _DEF.env.gw_mu_r),
    _Key("env.gw.mu_r_jitter", _parse_float, _DEF.env.gw_mu_r_jitter, _ge(0.0, "0")),
    _Key("env.gw.delta", _parse_float, _DEF.env.gw_delta, _gt(0.0, "0")),
    _Key("env.gw.sigma_step", _parse_float, _DEF.env.gw_sigma_step, _ge(0.0, "0")),
    _Key("env.gw.bin_width", _auto_or(_parse_float), _DEF.env.gw_bin_width, _gt(0.0, "0")),
    _Key("env.gw.drift_values", _parse_float_list, _DEF.env.gw_drift_values),
    _Key("env.gw.target_drift", _parse_float, _DEF.env.gw_target_drift),
    _Key("env.ac.modulus", _parse_int, _DEF.env.ac_modulus, _ge(2, "2")),
    _Key("env.ac.min_ops", _parse_int, _DEF.env.ac_min_ops, _ge(0, "0")),
    _Key("env.ac.max_ops", _parse_int, _DEF.env.ac_max_ops, _ge(0, "0")),
    _Key("env.ac.p_corrupt", _parse_float, _DEF.env.ac_p_corrupt, _in_closed01),
    _Key("surrogate.norm_mode", _enum(NORM_SAMPLE_AVG, NORM_TOKEN_AVG), _DEF.surrogate.norm_mode),
    _Key("surrogate.eps_low", _parse_float, _DEF.surrogate.eps_low, _in_open01),
    _Key("surrogate.eps_high", _parse_float, _DEF.surrogate.eps_high, _in_open01),
    _Key("surrogate.tis_cap", _off_or(_parse_float), _DEF.surrogate.tis_cap, _ge(1.0, "1"), _fmt_off),
    _Key("surrogate.tis_mode", _enum(TIS_TOKEN, TIS_SEQUENCE), _DEF.surrogate.tis_mode),
    _Key("surrogate.updates_per_batch", _parse_int, _DEF.surrogate.updates_per_batch, _ge(1, "1")),
    _Key("shaping.method", _enum(*METHODS), _DEF.shaping.method),
    _Key("shaping.max_len", _auto_or(_parse_int), _DEF.shaping.max_len, _ge(1, "1")),
    _Key("shaping.alpha", _parse_float, _DEF.shaping.alpha, lambda v: None if 0.0 <= v < 1.0 else "must be in [0, 1)"),
    _Key("shaping.beta", _parse_float, _DEF.shaping.beta, _ge(0.0, "0")),
    _Key("shaping.lambda", _parse_float, _DEF.shaping.lam, _gt(0.0, "0")),
    _Key("shaping.tau", _parse_float, _DEF.shaping.tau, _gt(0.0, "0")),
    _Key("shaping.k", _parse_int, _DEF.shaping.k, _ge(1, "1")),
    _Key("shaping.drop_incorrect", _parse_bool, _DEF.shaping.drop_incorrect),
    _Key("shaping.alp_acc_mode", _enum(ACC_EMA, ACC_PER_BATCH), _DEF.shaping.alp_acc_mode),
)

_KEY_BY_NAME = {k.name: k for k in KEYS}


def _cross_checks(values: dict) -> None:
    if values["problems_per_batch"] > values["train_problems"]:
        raise ConfigError("problems_per_batch", "cannot exceed train_problems")
    if values["surrogate.eps_low"] > values["surrogate.eps_high"]:
        raise ConfigError("surrogate.eps_low", "cannot exceed surrogate.eps_high")
    if values["env.ac.max_ops"] < values["env.ac.min_ops"]:
        raise ConfigError("env.ac.max_ops", "cannot be below env.ac.min_ops")
    if values["env.reward"] == REWARD_GAUSSIAN:
        if values["env.kind"] != GAUSSIAN_WALK:
            raise ConfigError("env.reward", "gaussian reward needs env.kind=gaussian_walk")
        if values["shaping.method"] != METHOD_NONE:
            raise ConfigError("env.reward", "gaussian reward is only available with shaping.method=none")
    if not math.isfinite(values["init_drift_bias"]):
        raise ConfigError("init_drift_bias", "must be finite")


def _build(values: dict) -> TrainConfig:
    _cross_checks(values)
    env = EnvConfig(
        kind=values["env.kind"],
        reward=values["env.reward"],
        gw_mu0=values["env.gw.mu0"],
        gw_mu_r=values["env.gw.mu_r"],
        gw_mu_r_jitter=values["env.gw.mu_r_jitter"],
        gw_delta=values["env.gw.delta"],
        gw_sigma_step=values["env.gw.sigma_step"],
        gw_bin_width=values["env.gw.bin_width"],
        gw_drift_values=values["env.gw.drift_values"],
        gw_target_drift=values["env.gw.target_drift"],
        ac_modulus=values["env.ac.modulus"],
        ac_min_ops=values["env.ac.min_ops"],
        ac_max_ops=values["env.ac.max_ops"],
        ac_p_corrupt=values["env.ac.p_corrupt"],
    )
    surrogate = SurrogateConfig(
        norm_mode=values["surrogate.norm_mode"],
        eps_low=values["surrogate.eps_low"],
        eps_high=values["surrogate.eps_high"],
        tis_cap=values["surrogate.tis_cap"],
        tis_mode=values["surrogate.tis_mode"],
        updates_per_batch=values["surrogate.updates_per_batch"],
    )
    shaping = ShapingConfig(
        method=values["shaping.method"],
        max_len=values["shaping.max_len"],
        alpha=values["shaping.alpha"],
        beta=values["shaping.beta"],
        lam=values["shaping.lambda"],
        tau=values["shaping.tau"],
        k=values["shaping.k"],
        drop_incorrect=values["shaping.drop_incorrect"],
        alp_acc_mode=values["shaping.alp_acc_mode"],
    )
    return TrainConfig(
        seed=values["seed"],
        steps=values["steps"],
        group_size=values["G"],
        problems_per_batch=values["problems_per_batch"],
        train_problems=values["train_problems"],
        eval_problems=values["eval_problems"],
        cap=values["cap"],
        pilot_rollouts=values["pilot_rollouts"],
        pilot_cap=values["pilot_cap"],
        lr=values["lr"],
        policy_init=values["policy_init"],
        init_stop_hazard=values["init_stop_hazard"],
        init_drift_bias=values["init_drift_bias"],
        bucket_size=values["bucket_size"],
        eval_every=values["eval_every"],
        eval_samples=values["eval_samples"],
        eval_temperature=values["eval_temperature"],
        advantage=values["advantage"],
        env=env,
        surrogate=surrogate,
        shaping=shaping,
    )


def config_values(cfg: TrainConfig) -> dict:
    """Flat key -> value mapping for a config (inverse of ``_build``)."""
    return {
        "seed": cfg.seed,
        "steps": cfg.steps,
        "G": cfg.group_size,
        "problems_per_batch": cfg.problems_per_batch,
        "train_problems": cfg.train_problems,
        "eval_problems": cfg.eval_problems,
        "cap": cfg.cap,
        "pilot_rollouts": cfg.pilot_rollouts,
        "pilot_cap": cfg.pilot_cap,
        "lr": cfg.lr,
        "policy_init": cfg.policy_init,
        "init_stop_hazard": cfg.init_stop_hazard,
        "init_drift_bias": cfg.init_drift_bias,
        "bucket_size": cfg.bucket_size,
        "eval_every": cfg.eval_every,
        "eval_samples": cfg.eval_samples,
        "eval_temperature": cfg.eval_temperature,
        "advantage": cfg.advantage,
        "env.kind": cfg.env.kind,
        "env.reward": cfg.env.reward,
        "env.gw.mu0": cfg.env.gw_mu0,
        "env.gw.mu_r": cfg.env.gw_mu_r,
        "env.gw.mu_r_jitter": cfg.env.gw_mu_r_jitter,
        "env.gw.delta": cfg.env.gw_delta,
        "env.gw.sigma_step": cfg.env.gw_sigma_step,
        "env.gw.bin_width": cfg.env.gw_bin_width,
        "env.gw.drift_values": cfg.env.gw_drift_values,
        "env.gw.target_drift": cfg.env.gw_target_drift,
        "env.ac.modulus": cfg.env.ac_modulus,
        "env.ac.min_ops": cfg.env.ac_min_ops,
        "env.ac.max_ops": cfg.env.ac_max_ops,
        "env.ac.p_corrupt": cfg.env.ac_p_corrupt,
        "surrogate.norm_mode": cfg.surrogate.norm_mode,
        "surrogate.eps_low": cfg.surrogate.eps_low,
        "surrogate.eps_high": cfg.surrogate.eps_high,
        "surrogate.tis_cap": cfg.surrogate.tis_cap,
        "surrogate.tis_mode": cfg.surrogate.tis_mode,
        "surrogate.updates_per_batch": cfg.surrogate.updates_per_batch,
        "shaping.method": cfg.shaping.method,
        "shaping.max_len": cfg.shaping.max_len,
        "shaping.alpha": cfg.shaping.alpha,
        "shaping.beta": cfg.shaping.beta,
        "shaping.lambda": cfg.shaping.lam,
        "shaping.tau": cfg.shaping.tau,
        "shaping.k": cfg.shaping.k,
        "shaping.drop_incorrect": cfg.shaping.drop_incorrect,
        "shaping.alp_acc_mode": cfg.shaping.alp_acc_mode,
    }


def parse_config(text: str) -> TrainConfig:
    """Parse config text; unknown keys, bad types, and constraint violations
    raise ``ConfigError`` naming the key. Absent keys take defaults."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"not a key=value line: {line.strip()!r}")
        name, raw_value = (part.strip() for part in stripped.split("=", 1))
        if name not in _KEY_BY_NAME:
            raise ConfigError(name, "unknown key")
        if name in raw:
            raise ConfigError(name, "duplicate key")
        raw[name] = raw_value

    values: dict[str, object] = {}
    for key in KEYS:
        if key.name in raw:
            try:
                value = key.parse(raw[key.name])
            except ValueError as exc:
                raise ConfigError(key.name, str(exc)) from None
        else:
            value = key.default
        problem = key.check(value)
        if problem is not None:
            raise ConfigError(key.name, problem)
        values[key.name] = value
    return _build(values)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: TrainConfig) -> str:
    """Render every key (resolved defaults included) in registry order."""
    values = config_values(cfg)
    lines = [f"{key.name} = {key.fmt(values[key.name])}" for key in KEYS]
    return "\n".join(lines) + "\n"


def set_key(cfg: TrainConfig, name: str, value) -> TrainConfig:
    """Return a config with one key replaced; string values go through the
    key's parser. Unknown names raise ``ConfigError``."""
    if name not in _KEY_BY_NAME:
        raise ConfigError(name, "unknown key")
    key = _KEY_BY_NAME[name]
    if isinstance(value, str):
        try:
            value = key.parse(value)
        except ValueError as exc:
            raise ConfigError(name, str(exc)) from None
    problem = key.check(value)
    if problem is not None:
        raise ConfigError(name, problem)
    values = config_values(cfg)
    values[name] = value
    return _build(values)
