"""Run configuration: one YAML file carrying every tunable."""
from __future__ import annotations

import copy
import hashlib
from pathlib import Path

import yaml

from .dataio import canonical_json

DEFAULTS: dict = {
    "seed": 0,
    "utc_offset_h": 0.0,
    "scenario": {},
    "wavelet": {"min_period": 2.0, "max_period": 30.0},
    "train": {
        "beta": 0.25,
        "lr": 1e-3,
        "weight_decay": 1e-5,
        "momentum": 0.0,
        "batch_size": 128,
        "max_epochs": 150,
        "patience": 10,
        "min_delta": 1e-5,
        "reduction": "mean",
        "optimizer": "adam",
        "split_ratio": 0.8,
    },
    "thresholds": {"percentile": 95.0, "strategy": "time-dependent"},
    "forest": {
        "label_contamination": 0.3,
        "ml_contamination": 0.1,
        "trees": 100,
        "subsample": 256,
    },
    "fusion": {"policy": "deep or rule or ml", "ml_window_percentile": 95.0, "slow_run": 3},
    "labels": {"overlap_k": 3},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ValueError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "scenario":
            if not isinstance(value, dict):
                raise ValueError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
