"""Run configuration: line-oriented ``key = value`` files with includes,
schema validation, presets, stable hashing and named RNG streams.

Syntax::

    # comment
    include base.cfg          # path relative to the including file
    preset = full            # optional; applies before the file's own keys
    imitation.k = 32
    imitation.hidden = 128, 128, 128

Later assignments override earlier ones; keys from an included file are
applied at the point of the ``include`` line.
"""

from __future__ import annotations

import hashlib
import os
import zlib
from dataclasses import dataclass

import numpy as np

from catprior.errors import ConfigurationError

RUN_DIR_ENV = "CATPRIOR_RUN_DIR"

# key -> (type, default).  Tuple types hold ints/floats/strs.
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "run_name": (str, "run"),
    "data.skills": (tuple, ("idle", "punch", "walk")),
    "data.duration": (float, 4.0),
    "ppo.gamma": (float, 0.95),
    "ppo.lam": (float, 0.95),
    "ppo.clip": (float, 0.1),
    "ppo.minibatch": (int, 1024),
    "ppo.epochs": (int, 4),
    "ppo.horizon": (int, 64),
    "ppo.value_coef": (float, 0.5),
    "ppo.max_grad_norm": (float, 1.0),
    "imitation.k": (int, 32),
    "imitation.d": (int, 8),
    "imitation.hidden": (tuple, (128, 128, 128)),
    "imitation.n_envs": (int, 64),
    "imitation.steps": (int, 2_000_000),
    "imitation.alpha": (float, 3.0),
    "imitation.beta": (float, 0.25),
    "imitation.rl_weight": (float, 1.0),
    "imitation.lr": (float, 3e-4),
    "imitation.normalize_obs": (bool, False),
    "imitation.restart_dead_after": (int, 20),
    "imitation.low_reward": (float, 0.1),
    "imitation.low_reward_steps": (int, 10),
    "prior.hidden": (tuple, (128, 128)),
    "latent.hold": (int, 1),
    "latent.episode_length": (int, 300),
    "latent.n_envs": (int, 64),
    "distill.iterations": (int, 200),
    "distill.horizon": (int, 16),
    "distill.lr": (float, 1e-3),
    "shift.steps": (int, 200_000),
    "shift.window": (int, 100_000),
    "shift.lr": (float, 3e-4),
    "shift.critic_hidden": (tuple, (64, 64)),
    "match.threshold": (float, 0.5),
    "task.steps": (int, 1_000_000),
    "task.n_envs": (int, 64),
    "task.hidden": (tuple, (64, 64)),
    "task.alpha_kl": (float, 0.05),
    "task.alpha_h": (float, 0.01),
    "task.lr": (float, 3e-4),
    "task.pool_interval": (int, 20),
    "strike.episode_length": (int, 150),
    "strike.target_speed": (float, 0.2),
    "compete.episode_length": (int, 200),
    "compete.damage_low": (float, 10.0),
    "compete.damage_high": (float, 60.0),
    "tournament.matches": (int, 100),
    "tournament.entries": (int, 8),
    "eval.pool_size": (int, 100_000),
    "eval.visit_steps": (int, 20_000),
    "eval.score_threshold": (float, 0.5),
}

# Full-scale values, selectable with ``preset = full``.
PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "full": {
        "imitation.k": 512, "imitation.d": 64, "imitation.lr": 5e-5, "ppo.minibatch": 16384,
        "task.lr": 1e-5, "shift.window": 1_000_000,
    },
}

# Fields that must agree between a stage and the checkpoints it consumes.
STRUCTURAL_KEYS = ("imitation.k", "imitation.d", "imitation.hidden", "data.skills")

STREAMS = ("sim", "sampler", "policy", "league", "data", "eval")


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def canonical(self) -> str:
        return "".join(f"{k} = {format_value(self.values[k])}\n" for k in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def structural(self) -> dict:
        return {k: format_value(self.values[k]) for k in STRUCTURAL_KEYS}

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        vals = dict(self.values)
        for k, v in overrides.items():
            vals[k] = parse_value(k, v)
        return RunConfig(vals)

    def rng(self, stream: str) -> np.random.Generator:
        return stream_rng(self.values["seed"], stream)


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per named subsystem, derived from the master seed."""
    if stream not in STREAMS:
        raise ConfigurationError(f"unknown RNG stream {stream!r}; known: {', '.join(STREAMS)}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(stream.encode())]))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scalar(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigurationError(f"unknown config key {key!r}")
    typ, _ = SCHEMA[key]
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            f = float(text)
            if f != int(f):
                raise ValueError(text)
            return int(f)
        if typ is float:
            return float(text)
        if typ is tuple:
            parts = [p.strip() for p in text.strip("()[]").split(",") if p.strip()]
            return tuple(_scalar(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {typ.__name__}") from exc


def _read_lines(path: str, seen: tuple[str, ...]) -> list[tuple[str, str, str]]:
    path = os.path.abspath(path)
    if path in seen:
        raise ConfigurationError(f"include cycle through {path}")
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    out = []
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            inc = line[len("include "):].strip()
            out += _read_lines(os.path.join(os.path.dirname(path), inc), seen + (path,))
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out.append((k.strip(), v.strip(), f"{path}:{n}"))
    return out


def build(pairs: list[tuple[str, str, str]]) -> RunConfig:
    vals = {k: d for k, (_, d) in SCHEMA.items()}
    for k, v, where in pairs:
        if k == "preset":
            if v not in PRESETS:
                raise ConfigurationError(f"{where}: unknown preset {v!r}; known: {', '.join(PRESETS)}")
            vals.update(PRESETS[v])
            continue
        try:
            vals[k] = parse_value(k, v)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{where}: {exc}") from exc
    validate(vals)
    return RunConfig(vals)


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    pairs = _read_lines(path, ()) if path else []
    pairs += [(k, v, "command line") for k, v in (overrides or {}).items()]
    return build(pairs)


def default_config() -> RunConfig:
    return build([])


def validate(vals: dict) -> None:
    positive = ["imitation.k", "imitation.d", "imitation.n_envs", "ppo.minibatch", "ppo.epochs", "ppo.horizon",
                "latent.hold", "latent.n_envs", "shift.window", "task.n_envs", "task.pool_interval",
                "tournament.matches", "eval.pool_size"]
    for k in positive:
        if vals[k] <= 0:
            raise ConfigurationError(f"{k} must be positive, got {vals[k]}")
    for k in ("ppo.gamma", "ppo.lam"):
        if not 0.0 <= vals[k] <= 1.0:
            raise ConfigurationError(f"{k} must lie in [0, 1], got {vals[k]}")
    if vals["compete.damage_low"] > vals["compete.damage_high"]:
        raise ConfigurationError("compete.damage_low exceeds compete.damage_high")
    if vals["tournament.entries"] < 2:
        raise ConfigurationError("tournament.entries must be at least 2")
    for k in ("imitation.hidden", "prior.hidden", "task.hidden", "shift.critic_hidden"):
        if not vals[k] or any(not isinstance(h, int) or h <= 0 for h in vals[k]):
            raise ConfigurationError(f"{k} must be a list of positive integers")


def run_root(explicit: str | None = None) -> str:
    """Run-directory root: explicit flag, then the environment variable, then ./runs."""
    return explicit or os.environ.get(RUN_DIR_ENV) or os.path.join(os.getcwd(), "runs")
