"""Flat ``section.key = value`` experiment config files.

Every :class:`TrainConfig` field lives under ``train.``; the nested loss
weights, schedule and rasteriser settings under ``loss.``, ``schedule.`` and
``raster.``. Values are JSON literals (bare words are read as strings);
``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import os
from pathlib import Path

from .curriculum import ScheduleParams
from .losses import LossWeights
from .rasterizer import RasterConfig
from .trainer import TrainConfig

SECTIONS = {"loss": ("weights", LossWeights), "schedule": ("schedule", ScheduleParams),
            "raster": ("raster", RasterConfig)}


class ConfigError(ValueError):
    pass


def _encode(value) -> str:
    if isinstance(value, enum.Enum):
        value = value.value
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def to_flat(config: TrainConfig) -> dict[str, object]:
    flat = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            continue
        flat[f"train.{f.name}"] = value
    for section, (attr, _) in SECTIONS.items():
        sub = getattr(config, attr)
        for f in dataclasses.fields(sub):
            flat[f"{section}.{f.name}"] = getattr(sub, f.name)
    return flat


def dumps(config: TrainConfig) -> str:
    lines = [f"{key} = {_encode(value)}" for key, value in to_flat(config).items()]
    return "\n".join(lines) + "\n"


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def loads(text: str, base: TrainConfig | None = None) -> TrainConfig:
    flat = to_flat(base or TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in flat:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        flat[key] = _parse_value(value)
    return from_flat(flat)


def from_flat(flat: dict) -> TrainConfig:
    train = {}
    nested = {section: {} for section in SECTIONS}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section == "train":
            train[name] = value
        elif section in nested:
            nested[section][name] = value
        else:
            raise ConfigError(f"unknown section in key {key!r}")
    try:
        for section, (attr, cls) in SECTIONS.items():
            train[attr] = cls(**nested[section])
        return TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path) -> TrainConfig:
    return apply_env(loads(Path(path).read_text(encoding="utf-8")))


def save(config: TrainConfig, path) -> None:
    Path(path).write_text(dumps(config), encoding="utf-8")


def apply_env(config: TrainConfig) -> TrainConfig:
    """``OGS_SEED`` overrides the training and schedule seeds."""
    seed = os.environ.get("OGS_SEED")
    if seed is None or seed == "":
        return config
    try:
        s = int(seed)
    except ValueError as exc:
        raise ConfigError(f"OGS_SEED must be an integer, got {seed!r}") from exc
    return dataclasses.replace(config, seed=s, schedule=dataclasses.replace(config.schedule, seed=s))
