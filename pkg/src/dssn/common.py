"""Shared constants, error types and dataclass <-> dict helpers."""
from __future__ import annotations

import dataclasses
import typing
from typing import Any

IGNORE = 255


class ValidationError(ValueError):
    """Bad input or configuration. CLI maps this to exit status 2."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def from_dict(cls, data: dict[str, Any], path: str = ""):
    """Build dataclass ``cls`` from a plain dict, rejecting unknown keys.

    Nested dataclass fields are built recursively; lists become tuples when the
    field default is a tuple.
    """
    if not isinstance(data, dict):
        raise ValidationError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ValidationError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        sub = f"{path}.{name}" if path else name
        if _is_dataclass_type(tp):
            kwargs[name] = from_dict(tp, value, sub)
            continue
        if typing.get_origin(tp) is typing.Union:
            inner = [a for a in typing.get_args(tp) if a is not type(None)]
            if value is not None and len(inner) == 1 and _is_dataclass_type(inner[0]):
                kwargs[name] = from_dict(inner[0], value, sub)
                continue
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}" if path else str(exc)) from None
    except TypeError as exc:
        raise ValidationError(f"{path or cls.__name__}: {exc}") from None


def to_dict(obj) -> dict[str, Any]:
    out = dataclasses.asdict(obj)

    def fix(v):
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (tuple, list)):
            return [fix(x) for x in v]
        return v

    return fix(out)


def check_prob(name: str, value: float, upper_open: bool = False) -> None:
    ok = 0.0 <= value < 1.0 if upper_open else 0.0 <= value <= 1.0
    if not ok:
        bound = "[0, 1)" if upper_open else "[0, 1]"
        raise ValidationError(f"{name} must be in {bound}, got {value}")
