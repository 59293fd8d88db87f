"""JSON experiment configuration: defaults, deep merge, unknown-key rejection."""

from __future__ import annotations

import copy
import json

from .errors import ConfigError

DEFAULTS: dict = {
    "data": {
        "n_subjects": 60,
        "n_test": 30,
        "extent": 32,
        "channels": 2,
        "signal": 1.0,
        "tp_fraction": 34.0 / 59.0,
    },
    "patch": {
        "patch": 8,
        "dim": 32,
        "depth": 2,
    },
    "train": {
        "mode": "end_to_end",  # or ssl_frozen, transfer
        "epochs": 25,
        "batch_size": 8,
        "lr": 1e-3,
        "folds": 5,
        "encoder_checkpoint": None,
        "features": None,  # None -> all surviving clinical columns
    },
    "ssl": {
        "steps": 150,
        "batch_size": 8,
        "mask_ratio": 0.3,
        "temperature": 0.1,
        "lambda_restore": 1.0,
        "lambda_contrast": 1.0,
        "lr": 1e-3,
        "noise_sigma": 0.05,
        "max_shift": 0.1,
        "flips": True,
    },
    "aux": {
        "steps": 150,
        "batch_size": 8,
        "lr": 1e-3,
    },
    "select": {
        "max_features": 8,
        "folds": 3,
    },
    "importance": {
        "permutations": 1,
    },
}


def _merge(defaults: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be an object")
            out[key] = _merge(defaults[key], value, dotted)
        else:
            out[key] = value
    return out


def resolve_config(overrides: dict | None) -> dict:
    """Defaults overlaid with user settings; any unrecognized key is an error."""
    return _merge(DEFAULTS, overrides or {}, "")


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config(None)
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return resolve_config(user)
