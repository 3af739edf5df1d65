"""Run configuration: built-in presets, schema validation and seed sub-streams."""
from __future__ import annotations

import copy
import hashlib
import json
import zlib

import jsonschema
import numpy as np

DESK = {
    "seed": 0,
    "family": {"teachers": 10, "test": 4},
    "teacher": {
        "psi_bins": [201], "psi_dot_bins": [101], "action_bins": 17,
        "gamma": 0.99, "sweeps": 3000, "tolerance": 1e-3, "noise_std": 0.0,
        "quality_rollouts": 4, "horizon": 200,
    },
    "dataset": {"total": 50_000, "epsilon": 0.5, "horizon": 200, "val_fraction": 0.02},
    "qtrain": {
        "latent_dim": 8, "iterations": 50_000, "batch_size": 32, "lik_weight": 10.0,
        "kl_weight": 0.003, "kl_warmup_steps": 5_000, "gamma": 0.99, "target_update_rate": 0.005,
        "mc_samples": 1, "lr": 3e-4, "depth": 4, "width": 64, "popart_rate": 3e-4, "val_interval": 1000,
    },
    "policytrain": {
        "iterations": 100_000, "batch_size": 128, "lr": 3e-4, "weight_decay": 0.01, "depth": 4,
        "width": 64, "eval_interval": 100, "eval_mdps": 5, "eval_rollouts": 2, "horizon": 200,
    },
    "adapt": {
        "method": "both", "top_k": 2, "snr_threshold": None, "dims": None, "pin": "zero",
        "bo": {"init_samples": 5, "iterations": 15, "rollouts_per_eval": 4, "horizon": 200,
               "ucb_beta": 2.0, "noise_var": 1e-3, "box": None, "box_margin": 1.0, "seed_reset": True},
        "sgd": {"transitions": 16_000, "horizon": 200, "epsilon": 0.5, "iterations": 2000,
                "batch_size": 32, "lr": 1e-2, "mc_samples": 1},
    },
    "eval": {"n_rollouts": 100, "horizon": 200},
}

PAPER = copy.deepcopy(DESK)
PAPER["family"]["teachers"] = 40
PAPER["teacher"].update(psi_bins=[71, 93], psi_dot_bins=[71, 93], action_bins=101, sweeps=100_000,
                        tolerance=1e-6)
PAPER["dataset"]["total"] = 1_000_000
PAPER["qtrain"].update(iterations=1_000_000, kl_weight=0.001, kl_warmup_steps=50_000,
                       target_update_rate=0.001, lr=1e-4, depth=10, width=400, val_interval=10_000)
PAPER["policytrain"].update(iterations=2_000_000, lr=1e-4, depth=10, width=400)
PAPER["eval"]["n_rollouts"] = 1000

PRESETS = {"desk": DESK, "paper": PAPER}

_NULLABLE = {("adapt", "snr_threshold"): "number", ("adapt", "dims"): "array", ("adapt", "bo", "box"): "array"}
_ENUMS = {("adapt", "pin"): ["zero", "mean"], ("adapt", "method"): ["sgd", "bo", "both"]}
_ZERO_OK = {"seed", "iterations", "kl_warmup_steps"}  # every other count must be >= 1
_UNIT = {"gamma", "epsilon", "val_fraction", "target_update_rate", "popart_rate"}  # probabilities and rates


def _schema_for(value, path=()):
    if path in _NULLABLE:
        return {"type": [_NULLABLE[path], "null"]}
    if path in _ENUMS:
        return {"enum": _ENUMS[path]}
    if isinstance(value, dict):
        return {"type": "object", "additionalProperties": False,
                "required": sorted(value),
                "properties": {k: _schema_for(v, path + (k,)) for k, v in value.items()}}
    if isinstance(value, bool):
        return {"type": "boolean"}
    key = path[-1] if path else ""
    if isinstance(value, int):
        return {"type": "integer", "minimum": 0 if key in _ZERO_OK else 1}
    if isinstance(value, float):
        return {"type": "number", "minimum": 0, **({"maximum": 1} if key in _UNIT else {})}
    if isinstance(value, list):
        return {"type": "array", "items": _schema_for(value[0], path + ("[]",)), "minItems": 1}
    raise TypeError(f"no schema rule for {path}: {value!r}")


SCHEMA = _schema_for(DESK)


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in out:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def validate(cfg):
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return cfg


def resolve(preset="desk", path=None, seed=None):
    """Preset overlaid with an optional JSON file and seed override, then validated."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        with open(path) as f:
            override = json.load(f)
        if not isinstance(override, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, override)
    if seed is not None:
        cfg["seed"] = int(seed)
    return validate(cfg)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def stage_seed(root, name, index=0):
    """Independent 32-bit seed for a named sub-stream of the root seed."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(zlib.crc32(name.encode()), int(index)))
    return int(ss.generate_state(1)[0])


def stage_rng(root, name, index=0):
    return np.random.default_rng(stage_seed(root, name, index))
