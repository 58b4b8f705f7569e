"""Training configuration (JSON).  Defaults: 150 epochs, batch 16, Adam at lr 1e-4."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

MODEL_KINDS = ("custom", "mobilenetv2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: str = "custom"
    epochs: int = 150
    batch_size: int = 16
    learning_rate: float = 0.0001
    optimizer: str = "adam"
    seed: int = 42
    input_size: int = 224
    width_multiplier: float = 1.0
    head_hidden: int = 128
    freeze_backbone: bool = False
    smote_k: int = 5

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return asdict(self)

    def architecture(self) -> dict:
        """Fields that determine tensor shapes."""
        return {k: getattr(self, k) for k in ("model", "input_size", "width_multiplier", "head_hidden")}


_INT_FIELDS = ("epochs", "batch_size", "input_size", "head_hidden", "smote_k", "seed")
_FLOAT_FIELDS = ("learning_rate", "width_multiplier")


def validate(cfg: TrainConfig):
    if cfg.model not in MODEL_KINDS:
        raise ConfigError(f"model: unknown model kind {cfg.model!r}, expected one of {list(MODEL_KINDS)}")
    if cfg.optimizer != "adam":
        raise ConfigError(f"optimizer: only 'adam' is supported, got {cfg.optimizer!r}")
    for name in _INT_FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{name}: expected an integer, got {v!r}")
    for name in _FLOAT_FIELDS:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {v!r}")
    for name in _INT_FIELDS + _FLOAT_FIELDS:
        v = getattr(cfg, name)
        if name == "seed":
            if v < 0:
                raise ConfigError(f"seed: must be non-negative, got {v}")
        elif v <= 0:
            raise ConfigError(f"{name}: must be positive, got {v}")
    if not isinstance(cfg.freeze_backbone, bool):
        raise ConfigError(f"freeze_backbone: expected true/false, got {cfg.freeze_backbone!r}")


def config_from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    data = dict(data)
    for name in _FLOAT_FIELDS:
        if isinstance(data.get(name), int) and not isinstance(data[name], bool):
            data[name] = float(data[name])
    return TrainConfig(**data)


def parse_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    try:
        return config_from_dict(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
