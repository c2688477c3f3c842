"""JSON run configuration: defaults, schema validation, hashing."""

from __future__ import annotations

import copy
import hashlib
import json

from .errors import ConfigError
from .rng import derive_seed

DEFAULTS = {
    "data": {
        "source": "synthetic",
        "path": None,
        "n_structures": 2000,
        "atoms_min": 8,
        "atoms_max": 16,
        "box_size": 3.0,
        "cutoff": 2.5,
        "epsilon": 1.0,
        "sigma": 1.0,
        "min_separation": 0.85,
        "test_fraction": 0.1,
        "fractions": [0.25, 0.5, 0.75, 1.0],
        "seed": 0,
    },
    "model": {"depth": 3, "width": 32, "n_species": 1, "seed": 0},
    "train": {
        "epochs": 10,
        "batch_size": 32,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "force_weight": 1.0,
        "precision": "float64",
        "freeze": [],
    },
    "parallel": {"workers": 1, "zero1": False, "checkpoint_segments": 0},
    "output": {"dir": "runs"},
    "sweep": {
        "widths": [8, 16, 32, 64, 128],
        "depths": [1, 2, 3, 4, 5, 6],
        "seeds": [0],
    },
}

_TYPES = {
    "data": {
        "source": str, "path": (str, type(None)), "n_structures": int, "atoms_min": int,
        "atoms_max": int, "box_size": float, "cutoff": float, "epsilon": float, "sigma": float,
        "min_separation": float, "test_fraction": float, "fractions": list, "seed": int,
    },
    "model": {"depth": int, "width": int, "n_species": int, "seed": int},
    "train": {
        "epochs": int, "batch_size": int, "lr": float, "beta1": float, "beta2": float,
        "eps": float, "force_weight": float, "precision": str, "freeze": list,
    },
    "parallel": {"workers": int, "zero1": bool, "checkpoint_segments": (int, str)},
    "output": {"dir": str},
    "sweep": {"widths": list, "depths": list, "seeds": list},
}

# keys the user must state explicitly in a config file
REQUIRED = {"data": ("n_structures",), "model": ("depth", "width")}


def _check_type(section, key, value):
    expected = _TYPES[section][key]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{section}.{key}: expected int, got bool")
    if not isinstance(value, expected):
        raise ConfigError(f"{section}.{key}: wrong type {type(value).__name__}")
    return value


def resolve(raw: dict, require: bool = True) -> dict:
    """Validate ``raw`` against the schema and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if require:
        for section, keys in REQUIRED.items():
            for key in keys:
                if key not in raw.get(section, {}):
                    raise ConfigError(f"missing required key {section}.{key}")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in raw.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be an object")
        bad = set(values) - set(DEFAULTS[section])
        if bad:
            raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(bad))}")
        for key, value in values.items():
            cfg[section][key] = _check_type(section, key, value)
    _check_values(cfg)
    return cfg


def _check_values(cfg):
    d, m, t, p = cfg["data"], cfg["model"], cfg["train"], cfg["parallel"]
    if d["source"] not in ("synthetic", "extxyz"):
        raise ConfigError("data.source must be 'synthetic' or 'extxyz'")
    if d["source"] == "extxyz" and not d["path"]:
        raise ConfigError("data.path is required for extxyz input")
    if not 0 < d["test_fraction"] < 1:
        raise ConfigError("data.test_fraction must be in (0, 1)")
    if not d["fractions"] or any(not isinstance(f, (int, float)) or not 0 < f <= 1 for f in d["fractions"]):
        raise ConfigError("data.fractions must be non-empty values in (0, 1]")
    if m["depth"] < 1 or m["width"] < 1 or m["n_species"] < 1:
        raise ConfigError("model.depth, model.width and model.n_species must be >= 1")
    if t["epochs"] < 0 or t["batch_size"] < 1:
        raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
    if t["force_weight"] < 0:
        raise ConfigError("train.force_weight must be >= 0")
    if t["precision"] not in ("float32", "float64"):
        raise ConfigError("train.precision must be 'float32' or 'float64'")
    if p["workers"] < 1:
        raise ConfigError("parallel.workers must be >= 1")
    if t["batch_size"] < p["workers"]:
        raise ConfigError("train.batch_size must be >= parallel.workers")
    ck = p["checkpoint_segments"]
    if isinstance(ck, str) and ck != "auto" or isinstance(ck, int) and ck < 0:
        raise ConfigError("parallel.checkpoint_segments must be 'auto' or an int >= 0")
    for key in ("widths", "depths", "seeds"):
        vals = cfg["sweep"][key]
        if not vals or any(not isinstance(v, int) or isinstance(v, bool) for v in vals):
            raise ConfigError(f"sweep.{key} must be a non-empty list of ints")


def apply_seed(cfg: dict, global_seed: int) -> dict:
    """Override every nested seed with ``derive_seed(global_seed, path)``."""
    cfg = copy.deepcopy(cfg)
    cfg["data"]["seed"] = derive_seed(global_seed, "data.seed")
    cfg["model"]["seed"] = derive_seed(global_seed, "model.seed")
    cfg["sweep"]["seeds"] = [
        derive_seed(global_seed, f"sweep.seeds.{i}") for i in range(len(cfg["sweep"]["seeds"]))
    ]
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Hash of everything that affects results (the output directory does not)."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()[:16]


def load_config(path, require: bool = True) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return resolve(raw, require)
