"""Run configuration: defaults, validation, and key=value config files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """A configuration value or file is invalid."""


@dataclass
class TrainConfig:
    """All tunables for building and training the summarizer.

    Defaults follow the reference setup: batch 32, dropout 0.5, Adam at
    1e-3, 256-wide hidden layers and embeddings, 500/100 length caps,
    100k vocabulary cap, re-encoding period K=100, uniform init in
    [-0.05, 0.05].
    """

    batch_size: int = 32
    dropout: float = 0.5
    learning_rate: float = 0.001
    hidden_master: int = 256
    hidden_slave: int = 256
    hidden_decoder: int = 256
    d_c: int = 256
    embedding: int = 256
    max_in: int = 500
    max_out: int = 100
    vocab_max: int = 100_000
    K: int = 100
    coverage_weight: float = 1.0
    init_range: float = 0.05
    seed: int = 0
    epochs: int = 20
    grad_clip: float = 2.0
    early_stop_patience: int = 5           # 0 disables early stopping
    dtype: str = "float64"
    tokenizer: str = "char_cjk"
    pointer: bool = True
    coverage: bool = True
    slave: bool = True
    use_spec: bool = True
    use_claims: bool = True
    untie_ws: bool = False
    cd_from_source: bool = False

    @property
    def attention_width(self) -> int:
        return self.hidden_decoder

    def validate(self) -> None:
        positive = (
            "batch_size hidden_master hidden_slave hidden_decoder d_c embedding "
            "max_in max_out vocab_max K epochs"
        ).split()
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.coverage_weight < 0:
            raise ConfigError("coverage_weight must be nonnegative")
        if not (self.use_spec or self.use_claims):
            raise ConfigError("at least one of use_spec/use_claims must be true")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.tokenizer not in ("char_cjk", "whitespace"):
            raise ConfigError(f"unknown tokenizer {self.tokenizer!r}")
        if self.early_stop_patience < 0:
            raise ConfigError("early_stop_patience must be >= 0")
        if self.max_out < 3:
            raise ConfigError("max_out must leave room for START/STOP framing")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg


def _coerce(name: str, raw: str, target_type) -> object:
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def load_config_file(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a UTF-8 key=value file on top of ``base`` (or the defaults)."""
    values = (base or TrainConfig()).as_dict()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    py_types = {"int": int, "float": float, "str": str, "bool": bool}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in values:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            t = types[key]
            t = py_types[t] if isinstance(t, str) else t
            values[key] = _coerce(key, raw, t)
    return TrainConfig.from_dict(values)
