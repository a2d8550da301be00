"""Flat ``key = value`` text files with ``#`` comments."""

from __future__ import annotations

import dataclasses
import enum
from pathlib import Path

from .errors import ConfigurationError


def format_value(value) -> str:
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def dumps(mapping, header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {line}" for line in header.splitlines())
    for key, value in mapping.items():
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load(path) -> dict[str, str]:
    return loads(Path(path).read_text())


def dump(mapping, path, header=None) -> None:
    Path(path).write_text(dumps(mapping, header))


def _coerce(text: str, kind):
    if kind is bool:
        lowered = text.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(text)
        return lowered in ("true", "1", "yes")
    if isinstance(kind, type) and issubclass(kind, enum.Enum):
        return kind(text.lower())
    return kind(text)


def apply(instance, values: dict[str, str], strict: bool = True):
    """Return a copy of a dataclass with string ``values`` coerced onto its fields.

    Unknown keys raise :class:`ConfigurationError` when ``strict``.
    """
    fields = {f.name: f for f in dataclasses.fields(instance)}
    changes = {}
    for key, text in values.items():
        if key not in fields:
            if strict:
                raise ConfigurationError(f"unknown key {key!r} for {type(instance).__name__}")
            continue
        kind = type(getattr(instance, key))
        try:
            changes[key] = _coerce(text, kind)
        except ValueError:
            raise ConfigurationError(f"bad value for {key}: {text!r}") from None
    return dataclasses.replace(instance, **changes)
