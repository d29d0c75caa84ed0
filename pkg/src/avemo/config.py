"""Run configuration: one JSON document, every default embedded, unknown keys rejected."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .audio import MelConfig
from .errors import ConfigError
from .fusion import FusionDims
from .geometry import ExpansionConfig
from .net import TrainConfig

DEFAULTS = {
    "task": "expr",
    "seed": 0,
    "paths": {
        "train_dir": None,
        "val_dir": None,
        "embedding_table": None,
        "checkpoint": "model.seqm",
        "log": "train_log.json",
    },
    "model": {
        "input_dim": 32,
        "hidden": 32,
        "bidirectional": True,
        "embedding_loss": True,
    },
    "window": {"length": 64, "stride": 64},
    "train": {k: v for k, v in asdict(TrainConfig()).items() if k != "seed"},
    "expansion": asdict(ExpansionConfig()),
    "mel": asdict(MelConfig()),
    "fusion": asdict(FusionDims()),
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            hint = " (the seed lives at the top level)" if key == "seed" else ""
            raise ConfigError(f"unknown config key {path!r}{hint}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` into a nested dict; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        cfg = _merge(cfg, user)
        base = Path(path).resolve().parent
        for k, v in cfg["paths"].items():
            if v is not None and not Path(v).is_absolute():
                cfg["paths"][k] = str(base / v)
    for text in overrides:
        cfg = _merge(cfg, parse_override(text))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["task"] not in ("expr", "va"):
        raise ConfigError(f"task must be 'expr' or 'va', got {cfg['task']!r}")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for key in ("input_dim", "hidden"):
        if not isinstance(cfg["model"][key], int) or cfg["model"][key] < 1:
            raise ConfigError(f"model.{key} must be a positive integer")
    w = cfg["window"]
    if w["length"] < 1 or w["stride"] < 1:
        raise ConfigError("window length and stride must be >= 1")
    try:
        train_config(cfg)
        ExpansionConfig(**cfg["expansion"])
        MelConfig(**cfg["mel"])
        FusionDims(**cfg["fusion"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])
