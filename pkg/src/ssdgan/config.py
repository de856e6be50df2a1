"""Training configuration and its line-oriented key=value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError

DATA_FRACTIONS = (25, 50, 75, 100)
TRAIN_GENERATOR_MODES = ("adain", "mapping_only")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    sn_enabled: bool = True
    generator_mode: str = "adain"
    data_fraction: int = 100
    val_noise_count: int = 500

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.beta1 < 1:
            raise ConfigError(f"beta1 must be in [0,1), got {self.beta1}")
        if not 0 <= self.beta2 < 1:
            raise ConfigError(f"beta2 must be in [0,1), got {self.beta2}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs statistics)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.generator_mode not in TRAIN_GENERATOR_MODES:
            raise ConfigError(f"unknown generator_mode {self.generator_mode!r}")
        if self.data_fraction not in DATA_FRACTIONS:
            raise ConfigError(
                f"data_fraction must be one of {DATA_FRACTIONS}, got {self.data_fraction}"
            )
        if self.val_noise_count < 1:
            raise ConfigError("val_noise_count must be >= 1")


def render_config(config: TrainConfig) -> str:
    """Serialize to line-oriented key=value text; parse_config inverts exactly."""
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.type == "bool" or isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    """Parse key=value lines; unknown keys and malformed lines are rejected."""
    field_map = {f.name: f for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in field_map:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        hint = field_map[key].type
        if hint == "bool":
            if val not in ("true", "false"):
                raise ConfigError(f"line {lineno}: {key} must be true or false")
            values[key] = val == "true"
        elif hint == "int":
            values[key] = int(val)
        elif hint == "float":
            values[key] = float(val)
        else:
            values[key] = val
    return TrainConfig(**values)


def config_as_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)
