"""Experiment configuration: one JSON file, one flat section per stage.

Every field has a default, so an empty ``{}`` is a valid desk-scale config.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path
from typing import Any

from ..stve import GRAPH_VARIANTS, GRU_VARIANTS, VARIANTS


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/desk",
    "p": 6,
    "q": 6,
    "split_ratios": [0.4, 0.1, 0.5],
    "horizons": [1, 2, 3, 6],
    "data": {
        # "synth" generates a city; "files" reads .f32 arrays with sidecars
        "source": "synth",
        "grid_path": None,
        "traffic_path": None,
        "coords_path": None,
        "edges_path": None,
        # "train": cell stats over the pre-test timeline; "full": whole timeline
        "stats_range": "train",
    },
    "synth": {},  # SynthConfig overrides
    "graph": {
        "kind": "proximity",  # proximity | adjacency | distance | file
        "k": 4,
        "sigma": None,
        "threshold": 0.1,
        "symmetrize": False,
    },
    "vae": {"latent_dim": 8, "beta": 1e-3, "epochs": 50, "patience": 10, "batch_size": 64, "lr": 1e-3},
    "forecaster": {"hidden": 64, "epochs": 40, "patience": 10, "batch_size": 64, "lr": 1e-3},
    "predictor": {
        "models": ["gru", "dcrnn"],
        "variants": {"gru": list(GRU_VARIANTS), "dcrnn": list(GRAPH_VARIANTS)},
        "seeds": [0, 1, 2],
        "d": 32,
        "hidden": 64,
        "K": 2,
        "epochs": 40,
        "patience": 10,
        "batch_size": 64,
        "lr": 1e-3,
        "loss": "mae",
        "autoregressive": False,
        "train_on_true_future": False,
    },
    "evaluate": {"workers": 2},
    "interpret": {
        "threshold": 0.997,
        "groupings": ["weekday/weekend", "bimonthly", "none"],
        "components": 2,
        "alphas": [-3.0, 3.0],
        "render": True,
    },
    "report": {"render": True},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("synth", "variants"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | os.PathLike | None = None, seed: int | None = None,
                out: str | os.PathLike | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then ``overrides``, then ``VF_OUT``, then CLI flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    if os.environ.get("VF_OUT"):
        cfg["out"] = os.environ["VF_OUT"]
    if out is not None:
        cfg["out"] = str(out)
    if seed is not None:
        cfg["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    p, q = cfg["p"], cfg["q"]
    if not (isinstance(p, int) and isinstance(q, int) and p > 0 and q > 0):
        raise ConfigError("p and q must be positive integers")
    r = cfg["split_ratios"]
    if len(r) != 3 or any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise ConfigError(f"split_ratios must be three positive numbers summing to 1, got {r}")
    if not cfg["horizons"] or any(not 1 <= h <= q for h in cfg["horizons"]):
        raise ConfigError(f"horizons must lie in [1, q={q}]")
    if cfg["data"]["source"] not in ("synth", "files"):
        raise ConfigError("data.source must be 'synth' or 'files'")
    if cfg["data"]["stats_range"] not in ("train", "full"):
        raise ConfigError("data.stats_range must be 'train' or 'full'")
    if cfg["graph"]["kind"] not in ("proximity", "adjacency", "distance", "file"):
        raise ConfigError(f"unknown graph kind {cfg['graph']['kind']!r}")
    pred = cfg["predictor"]
    for model in pred["models"]:
        if model not in ("gru", "dcrnn"):
            raise ConfigError(f"unknown model {model!r}")
        allowed = GRU_VARIANTS if model == "gru" else GRAPH_VARIANTS
        for v in pred["variants"].get(model, []):
            if v not in VARIANTS or v not in allowed:
                raise ConfigError(f"variant {v!r} not available for {model}")
    if not pred["seeds"]:
        raise ConfigError("predictor.seeds must not be empty")


def stable_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def stage_seed(master: int, *names: Any) -> int:
    """Deterministic per-stage seed from the master seed and stage name."""
    key = ":".join([str(master), *map(str, names)])
    return int(hashlib.sha256(key.encode()).hexdigest()[:8], 16)


def out_root(cfg: dict) -> Path:
    return Path(cfg["out"])
