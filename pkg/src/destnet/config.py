"""Flat key=value config files with typed coercion into dataclasses.

Lines are ``key=value``; blank lines and ``#`` comments are ignored. Keys
must match the target dataclass fields exactly, unknown keys are rejected.
Tuple-valued fields use comma-separated entries. Grid files may give several
alternatives for a key separated by ``|``; the grid is their product.
"""

from __future__ import annotations

import dataclasses
from itertools import product
from typing import Any

from .errors import DataError


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if key in out:
                raise DataError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def _coerce(raw: str, default: Any, key: str):
    # Field types are inferred from the dataclass defaults; every config
    # dataclass in this package defaults every field.
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            return raw
        if isinstance(default, tuple):
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        raise DataError(
            f"config key {key}={raw!r} is not a valid {type(default).__name__}") from None
    raise DataError(f"config key {key!r} has unsupported type")


def build_config(cls, values: dict[str, str], overrides: dict[str, Any] | None = None):
    """Instantiate ``cls`` from string values plus already-typed overrides."""
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise DataError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {key: _coerce(raw, defaults[key], key) for key, raw in values.items()}
    if overrides:
        bad = sorted(set(overrides) - set(defaults))
        if bad:
            raise DataError(f"unknown config overrides: {', '.join(bad)}")
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid configuration: {exc}") from None


def load_config(cls, path=None, overrides: dict[str, Any] | None = None):
    values = parse_kv_file(path) if path else {}
    return build_config(cls, values, overrides)


def expand_grid(values: dict[str, str]) -> list[tuple[str, dict[str, str]]]:
    """Expand ``|`` alternatives into (label, plain key=value dict) entries."""
    axes = []
    fixed = {}
    for key, raw in values.items():
        options = [v.strip() for v in raw.split("|")]
        if len(options) > 1:
            axes.append((key, options))
        else:
            fixed[key] = options[0]
    if not axes:
        return [("base", dict(fixed))]
    out = []
    for combo in product(*(opts for _, opts in axes)):
        entry = dict(fixed)
        parts = []
        for (key, _), value in zip(axes, combo):
            entry[key] = value
            parts.append(f"{key}={value}")
        out.append((",".join(parts), entry))
    return out
