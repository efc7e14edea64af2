"""Training configuration files: TOML with a JSON fallback.

Unknown keys are rejected so typos fail loudly.  Every field defaults to the
stylization pipeline's standard settings (3000 iterations, loss weights
(1, 10, 2, 1, 15), control warmup 100 / interval 100 / stop at half, color
thresholds 1e-5 -> 5e-6).
"""

from __future__ import annotations

import json
from dataclasses import fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .control import ControlConfig
from .optim import LearningRates
from .stylize import LossWeights
from .train import TrainConfig


def _build(cls, data, where):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    lrs = _build(LearningRates, data.pop("lrs", {}), "lrs")
    weights = _build(LossWeights, data.pop("loss_weights", {}), "loss_weights")
    controlcfg = _build(ControlConfig, data.pop("control", {}), "control")
    cfg = _build(TrainConfig, data, "top level")
    return replace(cfg, lrs=lrs, loss_weights=weights, control=controlcfg)


def load_config(path) -> TrainConfig:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        return config_from_dict(json.loads(raw.decode()))
    try:
        return config_from_dict(tomllib.loads(raw.decode()))
    except tomllib.TOMLDecodeError:
        return config_from_dict(json.loads(raw.decode()))


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name in ("lrs", "loss_weights", "control"):
            v = {sub.name: getattr(v, sub.name) for sub in fields(type(v))}
        out[f.name] = v
    return out
