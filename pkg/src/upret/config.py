"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

from .data import CorpusSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _schema() -> dict[str, type]:
    schema: dict[str, type] = {}
    for cls in (CorpusSpec, TrainConfig):
        for f in fields(cls):
            t = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool}[f.type]
            schema[f.name] = t
    return schema


SCHEMA = _schema()


def _coerce(key: str, raw: str):
    kind = SCHEMA[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}", "expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, raw)
    return values


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> dict:
    """Read a config file (optional), then apply flag overrides; flags win.

    ``threads`` falls back to ``UPRET_THREADS`` when neither source sets it.
    """
    values = {}
    if path is not None:
        values = parse_config_text(Path(path).read_text(), str(path))
    env = os.environ.get("UPRET_THREADS")
    if "threads" not in values and env:
        values["threads"] = _coerce("threads", env)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in SCHEMA:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    return values


def corpus_spec(values: dict) -> CorpusSpec:
    spec = CorpusSpec(**{f.name: values[f.name] for f in fields(CorpusSpec) if f.name in values})
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError("corpus", str(exc)) from None
    return spec


def train_config(values: dict) -> TrainConfig:
    cfg = TrainConfig.from_dict(values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None
    return cfg
