"""Flat ``key = value`` run configuration files and model overrides.

Example::

    # desk-scale run
    epochs = 30
    lr = 0.001
    sgc.k = 20
    sets = P_R+P_H
    sgc.widths = 64,64,64,128
"""

from __future__ import annotations

import dataclasses
from typing import Optional

from .errors import ConfigError, ParseError
from .model import ModelConfig, SpsConfig
from .sgc import SgcConfig

_NESTED = {"sps": SpsConfig, "sgc": SgcConfig}


def parse_value(text: str):
    """``true/false`` -> bool, ``none`` -> None, numbers, comma lists -> tuple, else str."""
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in t:
        return tuple(parse_value(p) for p in t.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def read_config_file(path) -> dict:
    """Parse a flat config file into ``{dotted_key: value}``; later keys win."""
    out = {}
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    with f:
        for lineno, line in enumerate(f, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError(f"expected 'key = value', got {text!r}", path, lineno)
            key, value = (s.strip() for s in text.split("=", 1))
            if not key or any(c.isspace() for c in key):
                raise ParseError(f"invalid key {key!r}", path, lineno)
            out[key] = parse_value(value)
    return out


# model fields that the CLI treats as run options
_RUN_LEVEL = {"seed"}


def model_field_names() -> set:
    names = {f.name for f in dataclasses.fields(ModelConfig)} - set(_NESTED)
    for prefix, cls in _NESTED.items():
        names |= {f"{prefix}.{f.name}" for f in dataclasses.fields(cls)}
    return names


def split_keys(values: dict) -> tuple:
    """Partition dotted keys into ``(model_overrides, run_options)``."""
    fields = model_field_names() - _RUN_LEVEL
    model = {k: v for k, v in values.items() if k in fields}
    run = {k: v for k, v in values.items() if k not in fields}
    return model, run


def _coerce(cls, name: str, value):
    """Make scalar config values match tuple-typed fields (``widths = 64``)."""
    default = {f.name: f for f in dataclasses.fields(cls)}[name]
    proto = default.default if default.default is not dataclasses.MISSING else None
    if isinstance(proto, tuple) and not isinstance(value, tuple):
        return (value,)
    return value


def apply_overrides(base: Optional[ModelConfig], overrides: dict) -> ModelConfig:
    """New config with dotted ``overrides`` applied on top of ``base``."""
    base = base or ModelConfig()
    d = base.to_dict()
    fields = model_field_names()
    for key, value in overrides.items():
        if key not in fields:
            raise ConfigError(f"unknown model config key {key!r}")
        if "." in key:
            prefix, name = key.split(".", 1)
            d[prefix][name] = _coerce(_NESTED[prefix], name, value)
        else:
            d[key] = _coerce(ModelConfig, key, value)
    try:
        return ModelConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def flatten(config: ModelConfig) -> dict:
    """Dotted ``{key: value}`` view used for provenance rows."""
    out = {}
    for k, v in config.to_dict().items():
        if isinstance(v, dict):
            out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        else:
            out[k] = v
    return out


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)
