"""Run configuration documents: defaults, environment presets and merging.

A run config is a nested JSON object. Unknown keys are rejected at every
level; ``None`` entries are filled from the environment preset when the
config is resolved.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .cells import CellConfig
from .envs.dataset import DEFAULT_LENGTH, DEFAULT_POLICY, ENV_KINDS
from .model import ModelConfig
from .planner import ICemConfig
from .training import TrainConfig

# architecture and recipe per environment (widths, warm-up, learning rate, p_min)
ENV_PRESETS = {
    "billiard": {"warmup": 2, "pre_widths": [64, 32, 16], "init_widths": [64, 32, 16], "lr": 0.001, "p_min": 0.0},
    "rrc": {"warmup": 1, "pre_widths": [32, 16, 8], "init_widths": [16], "lr": 0.005, "p_min": 0.02},
    "shepherd": {"warmup": 2, "pre_widths": [64, 32, 16], "init_widths": [64, 32, 16], "lr": 0.001, "p_min": 0.05},
}
OBS_ACT_DIMS = {"billiard": (2, 0), "rrc": (4, 2), "shepherd": (7, 3)}

DEFAULTS = {
    "env": "billiard",
    "seed": 0,
    "output": None,
    "dataset": {
        "path": None,
        "test_path": None,
        "gen_path": None,
        "count": 512,
        "length": None,
        "policy": None,
        "balance": None,
    },
    "model": {
        "cell": "gatel0rd",
        "gate": "retanh-stochastic",
        "latent_dim": 8,
        "layers": 1,
        "warmup": None,
        "pre_widths": None,
        "init_widths": None,
        "noise_variance": 0.1,
        "plain_output": False,
        "zero_init": False,
    },
    "train": {**TrainConfig().to_dict(), "lr": None, "p_min": None},
    "planner": {**ICemConfig().to_dict(), "task": "rrc", "episodes": 20},
    "sweep": {"cells": ["gatel0rd"], "lambdas": [0.0, 0.001, 0.01, 0.1], "seeds": [0, 1, 2], "workers": 1},
}


class ConfigError(ValueError):
    """Malformed or unknown configuration entries."""


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = merge(base[key], value, where)
        elif isinstance(base[key], dict):
            raise ConfigError(f"config key {where!r} must be an object")
        else:
            out[key] = value
    return out


def load(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def resolve(cfg: dict) -> dict:
    """Fill preset-dependent ``None`` entries and validate every section."""
    cfg = merge(DEFAULTS, cfg)
    env = cfg["env"]
    if env not in ENV_KINDS:
        raise ConfigError(f"unknown env {env!r}; valid names: {', '.join(ENV_KINDS)}")
    preset = ENV_PRESETS[env]
    ds, m, tr = cfg["dataset"], cfg["model"], cfg["train"]
    ds["length"] = ds["length"] or DEFAULT_LENGTH[env]
    ds["policy"] = ds["policy"] or DEFAULT_POLICY[env]
    for key in ("warmup", "pre_widths", "init_widths"):
        if m[key] is None:
            m[key] = copy.deepcopy(preset[key])
    for key in ("lr", "p_min"):
        if tr[key] is None:
            tr[key] = preset[key]
    try:
        train_config(cfg)
        model_config(cfg)
        planner_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def model_config(cfg: dict, obs_dim: int | None = None, act_dim: int | None = None) -> ModelConfig:
    m = cfg["model"]
    do, da = OBS_ACT_DIMS[cfg["env"]]
    cell = CellConfig(kind=m["cell"], latent_dim=m["latent_dim"], gate=m["gate"],
                      noise_variance=m["noise_variance"], plain_output=m["plain_output"],
                      layers=m["layers"])
    return ModelConfig(
        obs_dim=do if obs_dim is None else obs_dim,
        act_dim=da if act_dim is None else act_dim,
        cell=cell,
        warmup=m["warmup"],
        pre_widths=list(m["pre_widths"]),
        init_widths=list(m["init_widths"]),
        zero_init=m["zero_init"],
    )


def planner_config(cfg: dict) -> ICemConfig:
    p = {k: v for k, v in cfg["planner"].items() if k not in ("task", "episodes")}
    return ICemConfig.from_dict(p)


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
