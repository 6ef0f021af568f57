"""INI-style run configuration with strict key checking.

Sections map onto dataclasses::

    [synth]        -> SynthConfig
    [train]        -> TrainConfig
    [experiment]   -> ExperimentSpec (+ ``models``, ``frontends``, ``protocols``)

Every key is optional; unknown sections or keys raise :class:`ConfigError`.
Lists are comma separated; bands are written ``center:width`` (``70:10, 20:4``).
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from ecogdec.data import SynthConfig
from ecogdec.experiments import ExperimentSpec
from ecogdec.training import TrainConfig


class ConfigError(ValueError):
    pass


# keys of [experiment] that configure a sweep over several specs
SWEEP_KEYS = {"models": list, "frontends": list, "protocols": list, "jobs": int}

SECTIONS = {"synth": SynthConfig, "train": TrainConfig, "experiment": ExperimentSpec}
_SKIP = {"synth": {"channel_weights"}}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _split(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _number(s: str):
    f = float(s)
    return int(f) if f.is_integer() and "." not in s and "e" not in s.lower() else f


def parse_value(section: str, key: str, raw: str, kind):
    if key == "informative_bands":
        bands = []
        for item in _split(raw):
            center, _, width = item.partition(":")
            bands.append((float(center), float(width or 0.0)))
        return bands
    if key in ("seeds", "sizes"):
        return [int(v) for v in _split(raw)]
    if key in ("fractions", "frequencies"):
        return [float(v) for v in _split(raw)]
    if kind is list:
        return _split(raw)
    if kind is bool:
        return _parse_bool(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if raw.strip().lower() in ("", "none"):
        return None
    return raw.strip()


def _field_kinds(cls) -> dict:
    hints = typing.get_type_hints(cls)
    kinds = {}
    for f in dataclasses.fields(cls):
        t = hints[f.name]
        origin = typing.get_origin(t)
        if origin is typing.Union or type(t).__name__ == "UnionType":
            args = [a for a in typing.get_args(t) if a is not type(None)]
            t = args[0] if args else str
        kinds[f.name] = typing.get_origin(t) or t
    return kinds


def load_config(path=None, text: str | None = None) -> dict:
    """Parse a config file into ``{"synth": {...}, "train": {...}, "experiment": {...}}``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            parser.read_string(p.read_text(), source=str(p))
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}".replace("\n", " ")) from None
    out = {name: {} for name in SECTIONS}
    if parser.defaults():
        raise ConfigError(f"keys outside any section: {sorted(parser.defaults())}")
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        kinds = _field_kinds(SECTIONS[section])
        if section == "experiment":
            kinds.update(SWEEP_KEYS)
        for key, raw in parser.items(section):
            if key not in kinds or key in _SKIP.get(section, ()):
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                out[section][key] = parse_value(section, key, raw, kinds[key])
            except ValueError as e:
                raise ConfigError(f"[{section}] {key}: {e}") from None
    return out


def build(section: str, values: dict, overrides: dict | None = None):
    """Instantiate the section dataclass; ``overrides`` (CLI flags) win over file values."""
    cls = SECTIONS[section]
    merged = {k: v for k, v in values.items() if k not in SWEEP_KEYS}
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    try:
        return cls(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from None
