"""Run configuration: flat ``key = value`` files with command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .data import TASKS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # learning
    gamma: float = 0.9
    epsilon: float = 0.3
    read_penalty: float = 3.0
    rho: float = 0.99
    eta_min: float = 0.02
    eta_max: float = 0.2
    teacher_forcing: float = 1.0
    lr: float = 3e-4
    weight_decay: float = 1e-5
    clip_norm: float = 10.0
    batch_size: int = 128
    total_minibatches: int = 0
    epochs: int = 50
    seed: int = 0
    # model
    emb_dim: int = 256
    hidden_dim: int = 512
    num_gru_layers: int = 4
    leaky_slope: float = 0.01
    dropout_in: float = 0.2
    dropout_out: float = 0.5
    precision: str = "float32"
    # data
    task: str = ""
    alphabet_size: int = 16
    min_len: int = 2
    max_len: int = 12
    num_samples: int = 25000
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    min_freq: int = 3
    # output
    out_dir: str = "runs/rlst"
    bleu_smoothing: str = "off"
    figures: bool = True

    def __post_init__(self):
        check = _constraints(self)
        if check:
            raise ConfigError(check)

    def to_dict(self):
        return dataclasses.asdict(self)

    def n_minibatches(self, train_size: int) -> int:
        """Horizon for the estimation-loss weight schedule."""
        if self.total_minibatches > 0:
            return self.total_minibatches
        return self.epochs * -(-train_size // self.batch_size)

    def lines(self):
        return [f"{k} = {v}" for k, v in self.to_dict().items()]


def _constraints(c: RunConfig):
    for key in ("epsilon", "teacher_forcing"):
        if not 0.0 <= getattr(c, key) <= 1.0:
            return f"{key} must lie in [0, 1], got {getattr(c, key)}"
    for key in ("dropout_in", "dropout_out"):
        if not 0.0 <= getattr(c, key) < 1.0:
            return f"{key} must lie in [0, 1), got {getattr(c, key)}"
    for key in ("gamma", "rho"):
        if not 0.0 < getattr(c, key) < 1.0:
            return f"{key} must lie in (0, 1), got {getattr(c, key)}"
    if not 0.0 <= c.eta_min <= c.eta_max:
        return f"eta_min must satisfy 0 <= eta_min <= eta_max, got {c.eta_min}, {c.eta_max}"
    if c.lr <= 0:
        return f"lr must be positive, got {c.lr}"
    for key in ("read_penalty", "clip_norm"):
        if getattr(c, key) <= 0:
            return f"{key} must be positive, got {getattr(c, key)}"
    if c.weight_decay < 0:
        return f"weight_decay must be non-negative, got {c.weight_decay}"
    for key in ("batch_size", "epochs", "emb_dim", "hidden_dim", "num_gru_layers", "min_freq",
                "alphabet_size", "min_len", "num_samples"):
        if getattr(c, key) < 1:
            return f"{key} must be >= 1, got {getattr(c, key)}"
    if c.total_minibatches < 0:
        return "total_minibatches must be >= 0 (0 derives it from epochs)"
    if c.max_len < c.min_len:
        return f"max_len must be >= min_len, got {c.max_len} < {c.min_len}"
    if c.precision not in ("float32", "float64"):
        return f"precision must be float32 or float64, got {c.precision!r}"
    if c.task and c.task not in TASKS:
        return f"task must be one of {TASKS}, got {c.task!r}"
    if c.bleu_smoothing not in ("off", "add-one"):
        return f"bleu_smoothing must be 'off' or 'add-one', got {c.bleu_smoothing!r}"
    return None


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, raw = line.partition("=")
            key = key.strip()
            if not eq:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            if key not in FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = raw
    return values


def parse_config(path=None, overrides=None, env=None) -> RunConfig:
    """Resolve a :class:`RunConfig`: overrides beat the file, which beats defaults.

    ``RLST_SEED`` in the environment supplies the seed when neither the file
    nor the overrides set one.
    """
    env = os.environ if env is None else env
    raw = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = value if isinstance(value, str) else repr(value) if isinstance(value, float) else str(value)
    if "seed" not in raw and env.get("RLST_SEED"):
        raw["seed"] = env["RLST_SEED"]
    values = {k: _coerce(k, v) for k, v in raw.items()}
    return RunConfig(**values)
