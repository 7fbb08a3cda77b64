"""Plain-text ``key = value`` configuration files for training runs."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(TrainConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(TrainConfig)}


def coerce(key: str, text: str):
    """Convert the string ``text`` to the declared type of ``key``."""
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        # tuple[int, ...]
        return tuple(int(part) for part in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"config key {key!r} expects {getattr(kind, '__name__', kind)}, got {text!r}") from None


def parse_config(text: str) -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the file, then ``overrides`` (already typed, ``None`` = unset)."""
    values = parse_config(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _field_types():
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
