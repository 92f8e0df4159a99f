"""Run configuration: defaults < JSON file < XGRAN_* environment < CLI flags."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ENV_PREFIX = "XGRAN_"


@dataclass
class Config:
    seed: int = 0
    d: int = 32
    layers: int = 2
    granularities: list[int] = field(default_factory=lambda: [2, 4, 8, 16, 32])
    stride: int | None = None
    token_limit: int = 256
    percentile: float = 50.0
    embedder: str = "toy"
    teacher: str = "mean-pool"
    abbreviations: str | None = None
    # remote embedding service
    base_url: str = "http://localhost:8000/v1"
    model: str = "text-embedding"
    api_key_env: str = "EMBEDDINGS_API_KEY"
    batch_size: int = 64
    timeout: float = 30.0
    retries: int = 3
    max_concurrency: int = 1
    # training
    epochs: int = 2
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 1 / 3
    validation_interval: int = 1000
    # querying
    top_k: int = 10
    token_budget: int = 1024

    def to_dict(self) -> dict:
        return asdict(self)


_CHOICES = {"embedder": {"toy", "remote"}, "teacher": {"mean-pool", "remote"}}
_OPTIONAL = {"stride", "abbreviations"}


def _field_kind(name: str) -> str:
    for f in fields(Config):
        if f.name == name:
            t = str(f.type)
            if t.startswith("list"):
                return "int-list"
            if t.startswith("int"):
                return "int"
            if t.startswith("float"):
                return "float"
            return "str"
    raise ConfigError(f"unknown config key {name!r}")


def _coerce(name: str, value: Any, source: str) -> Any:
    kind = _field_kind(name)
    if value is None:
        if name in _OPTIONAL:
            return None
        raise ConfigError(f"{source}: {name} may not be null")
    if isinstance(value, str) and source.startswith("env"):
        try:
            if kind == "int":
                value = int(value)
            elif kind == "float":
                value = float(value)
            elif kind == "int-list":
                value = [int(tok) for tok in value.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"{source}: {name} expects {kind}, got {value!r}") from exc
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "str": isinstance(value, str),
        "int-list": isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value),
    }[kind]
    if not ok:
        raise ConfigError(f"{source}: {name} expects {kind}, got {type(value).__name__} {value!r}")
    if kind == "float":
        value = float(value)
    if name in _CHOICES and value not in _CHOICES[name]:
        raise ConfigError(f"{source}: {name} must be one of {sorted(_CHOICES[name])}, got {value!r}")
    return value


def config_load(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                flags: Mapping[str, Any] | None = None) -> Config:
    """Resolve a :class:`Config`. Flags whose value is ``None`` count as unset."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        for key, value in data.items():
            values[key] = _coerce(key, value, f"config file {path}")
    for key, raw in env.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            values[name] = _coerce(name, raw, f"env {key}")
    for key, value in (flags or {}).items():
        if value is not None:
            values[key] = _coerce(key, value, "flag")
    return Config(**values)
