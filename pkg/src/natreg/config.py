"""Plain-text ``key = value`` configuration files.

Model and training keys share one namespace; unknown keys are rejected so
typos surface immediately.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .transformer import ConfigurationError, ModelConfig


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    max_steps: int = 1000
    base_lr: float = 1.0
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    alpha: float = 2.0
    beta: float = 0.5
    mode: str = "both"
    eval_interval: int = 100
    dev_frac: float = 0.05
    sever_embedding: bool = False

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        if self.eval_interval < 1:
            raise ConfigurationError("eval_interval must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
assert not set(_MODEL_FIELDS) & set(_TRAIN_FIELDS)


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    model_defaults, train_defaults = ModelConfig(), TrainConfig()
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in _MODEL_FIELDS:
                model_kw[key] = _coerce(value, getattr(model_defaults, key))
            elif key in _TRAIN_FIELDS:
                train_kw[key] = _coerce(value, getattr(train_defaults, key))
            else:
                raise ConfigurationError(f"{source}:{n}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"{source}:{n}: bad value for {key!r}: {value!r}") from exc
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def format_config(*objs) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_model_config(path) -> ModelConfig:
    return load_config(path)[0]
