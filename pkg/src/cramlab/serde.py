"""String <-> dataclass field conversion shared by config files and
checkpoint manifests."""

from __future__ import annotations

import dataclasses
import types
import typing

from .errors import ConfigurationError


def parse_scalar(ftype, text: str):
    """Parse text into ftype (int, float, bool, str, or X | None)."""
    origin = typing.get_origin(ftype)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(ftype) if a is not type(None)]
        if text.strip().lower() in ("none", "null", ""):
            return None
        if len(args) != 1:
            raise ConfigurationError(f"unsupported union type {ftype}")
        return parse_scalar(args[0], text)
    text = text.strip()
    if ftype is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if ftype is int:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigurationError(f"not an integer: {text!r}") from exc
    if ftype is float:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigurationError(f"not a number: {text!r}") from exc
    if ftype is str:
        return text
    raise ConfigurationError(f"unsupported field type {ftype}")


def render_scalar(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dataclass_to_strs(obj) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        out[f.name] = render_scalar(getattr(obj, f.name))
    return out


def dataclass_update_from_strs(obj, strs: dict[str, str]):
    """Set fields named in strs, parsing values by annotation; unknown
    field names raise ConfigurationError."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    for key, text in strs.items():
        if key not in names:
            raise ConfigurationError(
                f"unknown field {key!r} for {type(obj).__name__}"
            )
        setattr(obj, key, parse_scalar(hints[key], text))
    return obj
