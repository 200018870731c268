"""Run-config files: defaults, validation, dotted-path overrides.

A run config is one JSON document covering the data source, model,
training hyperparameters, regularizer settings and augmentation. Loading
materializes every default so the config written back into a run
directory is fully resolved; unknown keys are rejected with their full
dotted path.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from . import data as data_mod
from .errors import ConfigError
from .trainer import TrainConfig

DEFAULTS = {
    "data": {
        "kind": "blobs",  # blobs | cifar10 | csv
        "path": None,
        "classes": 3,
        "per_class": 200,
        "dim": 16,
        "sep": 4.0,
        "seed": 0,
        "image_shape": None,
        "val_fraction": 0.2,
    },
    "model": {"kind": "mlp", "dims": None, "channels": None},
    "w_bits": 2,
    "a_bits": 4,
    "setting": "A",
    "epochs": 30,
    "batch_size": 256,
    "lr0": 0.01,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "str": 5.0,
    "e_warmup": 50,
    "seed": 0,
    "teacher": None,
    "baseline_mode": False,
    "full_precision": False,
    "learnable_steps": True,
    "calib_size": 100,
    "mec": {
        "eps_sq": "adaptive",
        "order": 2,
        "points": [0.0, 1.0, 3.0, 7.0],
        "experts": None,
        "maximize_entropy": True,
        "normalize_columns": True,
    },
    "augment": {"enabled": False, "hflip_prob": 0.5, "translate_pad": 4},
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        dotted = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(val, dict):
                raise ConfigError(f"{dotted} must be an object")
            out[key] = _merge(defaults[key], val, f"{dotted}.")
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(user: dict) -> dict:
    """Merge a user config over the defaults, rejecting unknown keys."""
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(DEFAULTS, user)


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    return resolve_config(user)


def parse_override_value(text: str):
    """`--set` values: JSON first, then comma lists, then bare strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_override_value(part) for part in text.split(",") if part != ""]
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if low in ("null", "none"):
        return None
    return text


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply `key=value` strings with dotted paths (e.g. mec.points=0,1,3,7)."""
    out = copy.deepcopy(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        parts = key.split(".")
        node = out
        ref = DEFAULTS
        for part in parts[:-1]:
            if not isinstance(ref, dict) or part not in ref:
                raise ConfigError(f"unknown config key: {key}")
            node = node.setdefault(part, {})
            ref = ref[part]
        leaf = parts[-1]
        if not isinstance(ref, dict) or leaf not in ref:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(ref[leaf], dict) and ref[leaf]:
            raise ConfigError(f"{key} is a section, not a value")
        node[leaf] = parse_override_value(raw)
    return out


def train_config_from(cfg: dict) -> TrainConfig:
    """Build the trainer-facing config object from a resolved run config."""
    model = {k: v for k, v in cfg["model"].items() if v is not None}
    d = {k: v for k, v in cfg.items() if k not in ("data", "model")}
    d["model"] = model
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_datasets(dcfg: dict):
    """(train, val) datasets from the config's data section."""
    kind = dcfg.get("kind")
    if kind == "blobs":
        shape = dcfg.get("image_shape")
        ds = data_mod.synth_blobs(
            classes=dcfg["classes"],
            per_class=dcfg["per_class"],
            dim=dcfg["dim"],
            sep=dcfg["sep"],
            seed=dcfg["seed"],
            image_shape=tuple(shape) if shape else None,
        )
        return data_mod.split_dataset(ds, dcfg["val_fraction"], seed=dcfg["seed"])
    if kind == "cifar10":
        if not dcfg.get("path"):
            raise ConfigError("data.path is required for kind=cifar10")
        train = data_mod.load_cifar10(dcfg["path"], split="train")
        val = data_mod.load_cifar10(dcfg["path"], split="test")
        return train, val
    if kind == "csv":
        if not dcfg.get("path"):
            raise ConfigError("data.path is required for kind=csv")
        ds = data_mod.load_csv(dcfg["path"])
        return data_mod.split_dataset(ds, dcfg["val_fraction"], seed=dcfg["seed"])
    raise ConfigError(f"unknown data.kind {kind!r}")
