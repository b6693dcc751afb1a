"""Experiment configuration: nested defaults, YAML/JSON files and env overrides.

Environment variables ``CGMX_<SECTION>__<KEY>`` override file values, e.g.
``CGMX_CGM__VAE__EPOCHS=5``. Values are parsed as YAML scalars, so numbers,
booleans and inline lists work.
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

import yaml

from .errors import ConfigError

ENV_PREFIX = "CGMX_"

DEFAULTS: dict = {
    "seed": 0,
    "out": "runs/default",
    "data": {
        "train_images": None,
        "train_attributes": None,
        "test_images": None,
        "test_attributes": None,
        "split_seed": 0,
        "val_fraction": 0.0,
    },
    "scm": {"hidden": 32, "lr": 1e-2, "max_steps": 3000, "patience": 200, "propagate": True, "seed": 0},
    "cgm": {
        "vae": {"epochs": 30, "batch_size": 128, "lr": 1e-3, "d_z": 64, "d_e": 16, "seed": 0, "beta": 1.0},
        "bigan": {
            "epochs": 30,
            "batch_size": 128,
            "lr": 2e-4,
            "lr_disc": 2e-4,
            "d_z": 64,
            "d_e": 16,
            "seed": 0,
            "recon_weight": 50.0,
            "latent_weight": 1.0,
            "label_adv_weight": 1.0,
            "aux_weight": 1.0,
        },
        "recon_gate": 0.05,
    },
    "clf": {"seed": 1, "epochs": 8, "batch_size": 128, "lr": 1e-3, "channels": [16, 32, 32, 64], "accuracy_gate": 0.95},
    "oracle": {"n": 10, "base_seed": 100},
    "ae": {"epochs": 30, "batch_size": 64, "lr": 1e-3, "code_dim": 16, "channels": [16, 32], "seed": 0, "recon_gate": 0.08},
    "sweep": {
        "attributes": ["thickness", "intensity", "slant"],
        "values": [-0.8, -0.5, 0.0, 0.5, 0.8],
        "explainers": ["shapley", "contrastive"],
        "instances": [0],
        "n_background": 100,
        "n_samples": 200,
        "model": "variational",
        "seed": 0,
    },
    "attributes": {"m": 4, "seed": 0, "n_background": 100, "background": "test", "per_class": 50, "include_label": False},
    "cf": {
        "methods": ["vae-grad", "bigan-grad", "vae-agnostic", "bigan-agnostic", "baseline-pixel"],
        "n_instances": 1000,
        "target_offset": 1,
        "seed": 0,
        "hinge": False,  # hinge the gradient-search margin like the pixel baseline
        "gradient": {"lam": 10.0, "steps": 300, "step_size": 0.05, "proximity": "mean", "margin": "log", "init_logit": 2.0},
        "agnostic": {"grid": 100},
        "baseline": {"lambdas": [1.0, 10.0, 100.0, 1000.0, 1.0e4, 1.0e5], "steps": 100, "step_size": 0.05, "kappa": 0.0},
    },
    "metrics": {"eps": 1e-8, "oracle_runs": 10, "level": 0.95},
    "morpho": {"threshold": 0.5, "scale": 4},
}

DATA_KEYS = ("train_images", "train_attributes", "test_images", "test_attributes")


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"config file not found: {path}")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("--config", "config file must contain a mapping")
    return data


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX) :].split("__") if k]
        if not keys:
            continue
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> dict:
    """Defaults <- file <- environment <- explicit overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = deep_merge(cfg, read_config_file(path))
    cfg = deep_merge(cfg, env_overrides(environ))
    return deep_merge(cfg, overrides or {})


def get(cfg: dict, dotted: str):
    node = cfg
    for k in dotted.split("."):
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(dotted, f"missing config key {dotted}")
        node = node[k]
    return node


def require_data_paths(cfg: dict, keys=DATA_KEYS) -> dict:
    """Resolve data paths, raising a :class:`ConfigError` that names the offending key."""
    out = {}
    for k in keys:
        key = f"data.{k}"
        value = cfg.get("data", {}).get(k)
        if not value:
            raise ConfigError(key, f"{key} is not set (config file or {ENV_PREFIX}DATA__{k.upper()})")
        p = Path(value)
        if not p.exists():
            raise ConfigError(key, f"{key} points to a missing file: {p}")
        out[k] = p
    return out
