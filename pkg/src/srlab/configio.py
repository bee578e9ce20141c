"""Dataclass config serialization: dict/YAML round trips and stable hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing

import yaml

__all__ = ["to_dict", "from_dict", "config_hash", "save_yaml", "load_yaml"]


def to_dict(obj):
    """Recursively convert a dataclass (or containers of them) to plain data."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def _convert(hint, value):
    origin = typing.get_origin(hint)
    if value is None:
        return None
    if dataclasses.is_dataclass(hint) and isinstance(value, dict):
        return from_dict(hint, value)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", ())):
        for arg in typing.get_args(hint):
            if arg is type(None):
                continue
            try:
                return _convert(arg, value)
            except (TypeError, ValueError):
                continue
        raise TypeError(f"cannot convert {value!r} to {hint}")
    if origin is tuple:
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v) for v in value)
        if args:
            return tuple(_convert(a, v) for a, v in zip(args, value))
        return tuple(value)
    if origin is list:
        (arg,) = typing.get_args(hint) or (typing.Any,)
        return [_convert(arg, v) for v in value]
    if origin is dict:
        return dict(value)
    if origin is typing.Literal:
        if value not in typing.get_args(hint):
            raise ValueError(f"{value!r} not in {typing.get_args(hint)}")
        return value
    if hint in (int, float, str, bool):
        return hint(value)
    return value


def from_dict(cls, data: dict):
    """Build a dataclass instance from plain data, recursing into fields."""
    if not dataclasses.is_dataclass(cls):
        raise TypeError(f"{cls} is not a dataclass")
    hints = typing.get_type_hints(cls)
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _convert(hints[f.name], data[f.name])
    return cls(**kwargs)


def config_hash(obj) -> str:
    """sha256 over the canonical JSON form; stable across runs and platforms."""
    payload = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def save_yaml(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(obj), fh, sort_keys=False)


def load_yaml(cls, path):
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} is not a mapping")
    return from_dict(cls, data)
