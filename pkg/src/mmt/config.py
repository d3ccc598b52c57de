"""Flat ``key = value`` run configuration.

One file covers the model, the optimiser and the data paths.  Lines starting
with ``#`` and blank lines are ignored; unknown keys are rejected.  Values are
resolved with the precedence command line > file > defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


@dataclass
class RunConfig:
    # model
    n_layers: int = 2
    d: int = 64
    d_ff: int = 128
    h: int = 4
    vocab_size: int = 64
    max_len: int = 32
    image_positions: int = 4
    image_dim: int = 16
    pooled_dim: int = 16
    imag_hidden: int = 64
    margin: float = 0.1
    scale_mode: str = "per_head"
    mode: str = "textual"
    imagination: bool = False
    imag_weight: float = 1.0
    pooling: str = "sum"
    dropout: float = 0.1
    ln_eps: float = 1e-6
    # optimisation
    steps: int = 1000
    batch_size: int = 32
    eval_interval: int = 250
    top_k: int = 10
    warmup: int = 4000
    init_lr: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 1
    bucket_factor: int = 8
    max_decode_len: int = 32
    # paths (empty = unset)
    train_data: str = ""
    valid_data: str = ""
    features: str = ""
    vocab: str = ""
    out_dir: str = ""

    def __post_init__(self):
        self.model_config()
        for name in ("steps", "batch_size", "top_k", "warmup"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.init_lr <= 0 or self.eps <= 0:
            raise ConfigError("optimiser hyperparameters out of range")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in ModelConfig.field_names()})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})

    def replace(self, **changes) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return RunConfig(**values)


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(RunConfig)}


def parse_value(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    raw = raw.strip()
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw


def parse_assignments(lines) -> dict:
    """``key = value`` lines -> {key: typed value}; later keys win."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        out[key] = parse_value(key, raw)
    return out


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return (base or RunConfig()).replace(**parse_assignments(text.splitlines()))


def serialize_config(config: RunConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    config = RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        config = parse_config(text, config)
    if overrides:
        config = config.replace(**parse_assignments(overrides))
    return config
