"""Experiment configuration: schema, loading, validation, defaults and hashing.

Configs are YAML or JSON key/value trees. Defense hyperparameters use the
symbol names of the training loop (``lambda``, ``alpha``, ``temperature``,
``eta_d``, ``eta_s``, ``a_iter``, ``epochs``, ``batch``). Every default lives
in :data:`CONFIG_SCHEMA` and is filled in by :func:`parse_config`, so the
normalized config echoed into results is complete and self-describing.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .errors import ConfigError

_ARCH = {
    "type": "object",
    "required": ["kind"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["mlp", "cnn_small"]},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "default": [64, 64]},
        "activation": {"enum": ["relu", "tanh"], "default": "relu"},
    },
}

_SYNTHETIC_PARAMS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n": {"type": "integer", "minimum": 2, "default": 2000},
        "num_classes": {"type": "integer", "minimum": 2, "default": 4},
        "dim": {"type": "integer", "minimum": 2, "default": 2},
        "class_separation": {"type": "number", "exclusiveMinimum": 0, "default": 4.0},
        "noise_std": {"type": "number", "exclusiveMinimum": 0, "default": 0.8},
    },
    "default": {},
}

_SURROGATE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed_offset": {"type": "integer", "default": 1000},
        "noise_scale": {"type": "number", "exclusiveMinimum": 0, "default": 1.0},
        "n": {"type": ["integer", "null"], "minimum": 1, "default": None},
    },
    "default": {},
}

_AUGMENTATION = {
    "type": "object",
    "properties": {"mode": {"enum": ["image", "vector", "identity", "auto"], "default": "auto"}},
    "default": {},
}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ExperimentConfig",
    "type": "object",
    "required": ["dataset", "target", "defense"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "default": 0},
        "output_dir": {"type": "string", "default": "runs/default"},
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["gaussian_mixture", "two_moons", "idx"]},
                "params": _SYNTHETIC_PARAMS,
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "num_classes": {"type": "integer", "minimum": 2, "default": 10},
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1,
                                   "default": 0.8},
                "surrogate": _SURROGATE,
            },
            "if": {"properties": {"kind": {"const": "idx"}}},
            "then": {"required": ["images", "labels"]},
        },
        "target": {
            "type": "object",
            "required": ["arch"],
            "additionalProperties": False,
            "properties": {
                "arch": _ARCH,
                "epochs": {"type": "integer", "minimum": 0, "default": 50},
                "lr": {"type": "number", "exclusiveMinimum": 0, "default": 0.05},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.9},
                "batch": {"type": "integer", "minimum": 1, "default": 64},
            },
        },
        "defense": {
            "type": "object",
            "required": ["members"],
            "additionalProperties": False,
            "properties": {
                "lambda": {"type": "number", "minimum": 0, "default": 0.01},
                "alpha": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.5},
                "temperature": {"type": "number", "exclusiveMinimum": 0, "default": 4.0},
                "eta_d": {"type": "number", "exclusiveMinimum": 0, "default": 0.05},
                "eta_s": {"type": "number", "exclusiveMinimum": 0, "default": 0.05},
                "a_iter": {"type": "integer", "minimum": 0, "default": 1},
                "epochs": {"type": "integer", "minimum": 0, "default": 30},
                "batch": {"type": "integer", "minimum": 1, "default": 64},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.0},
                "augmentation": _AUGMENTATION,
                "refresh_augmentation": {"type": "boolean", "default": False},
                "aug_copies": {"type": "integer", "minimum": 1, "default": 1},
                "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0, "default": 5.0},
                "workers": {"type": "integer", "minimum": 1, "default": 1},
                "members": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["arch"],
                        "additionalProperties": False,
                        "properties": {
                            "arch": _ARCH,
                            "attacker": {"anyOf": [_ARCH, {"type": "null"}], "default": None},
                            "overrides": {"type": "object", "default": {}},
                        },
                    },
                },
            },
        },
        "randp_budget": {"type": "number", "minimum": 0, "default": 1.0},
        "attacks": {
            "type": "array",
            "default": [],
            "items": {
                "type": "object",
                "required": ["kind", "clone"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": ["dbme", "dfme"]},
                    "mode": {"enum": ["soft", "hard"], "default": "soft"},
                    "budget": {"type": "integer", "minimum": 1, "default": 10000},
                    "budgets": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 1},
                                "minItems": 1, "default": None},
                    "clone": _ARCH,
                    "oracles": {
                        "type": "array",
                        "items": {"enum": ["undefended", "randp", "misleader", "members"]},
                        "minItems": 1,
                        "default": ["undefended", "randp", "misleader"],
                    },
                    "lr": {"type": "number", "minimum": 0, "default": 0.05},
                    "epochs": {"type": "integer", "minimum": 0, "default": 30},
                    "batch": {"type": "integer", "minimum": 1, "default": 64},
                    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1, "default": 0.9},
                    "seed": {"type": ["integer", "null"], "minimum": 0, "default": None},
                    "latent_dim": {"type": "integer", "minimum": 1, "default": 16},
                    "generator_hidden": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                         "default": [64, 64]},
                    "generator_lr": {"type": "number", "minimum": 0, "default": 0.01},
                    "gen_steps": {"type": "integer", "minimum": 0, "default": 1},
                    "student_steps": {"type": "integer", "minimum": 1, "default": 5},
                },
            },
        },
        "theory": {
            "type": "object",
            "additionalProperties": False,
            "default": {},
            "properties": {
                "enabled": {"type": "boolean", "default": True},
                "grid": {"type": "integer", "minimum": 1, "default": 3},
                "n": {"type": "integer", "minimum": 1, "default": 200},
                "draws": {"type": "integer", "minimum": 2, "default": 2000},
                "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1, "default": 0.05},
                "B": {"type": "number", "exclusiveMinimum": 0, "default": math.log(2.0)},
                "lambda": {"type": ["number", "null"], "minimum": 0, "default": None},
                "power_iters": {"type": "integer", "minimum": 50, "default": 100},
                "df_gap": {"type": "boolean", "default": True},
            },
        },
    },
}


def _fill_defaults(schema: dict, instance: Any) -> Any:
    if isinstance(instance, dict) and "properties" in schema:
        for key, sub in schema["properties"].items():
            if key not in instance and "default" in sub:
                instance[key] = copy.deepcopy(sub["default"])
            if key in instance:
                instance[key] = _fill_defaults(_concrete(sub, instance[key]), instance[key])
    elif isinstance(instance, list) and "items" in schema:
        return [_fill_defaults(schema["items"], item) for item in instance]
    return instance


def _concrete(schema: dict, value: Any) -> dict:
    """Pick the anyOf branch that describes ``value`` (nullable blocks)."""
    if "anyOf" in schema:
        for branch in schema["anyOf"]:
            if jsonschema.Draft202012Validator(branch).is_valid(value):
                return branch
    return schema


def _field_path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1] if "'" in error.message else "?"
        parts.append(missing)
    elif error.validator == "additionalProperties" and "'" in error.message:
        parts.append(error.message.split("'")[1])
    return ".".join(parts) or "<root>"


def validate_against(schema: dict, instance: Any, source: str = "config") -> None:
    """Raise ConfigError naming the first offending field (shallowest path first)."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(instance), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise ConfigError(f"{source}: field '{_field_path(err)}': {err.message}")


def parse_config(raw: dict, source: str = "config") -> dict:
    """Validate and return a deep copy with every default filled in."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    validate_against(CONFIG_SCHEMA, raw, source)
    cfg = _fill_defaults(CONFIG_SCHEMA, copy.deepcopy(raw))
    if cfg["dataset"]["kind"] != "idx":
        cfg["dataset"].setdefault("params", {})
    for i, att in enumerate(cfg["attacks"]):
        if att["kind"] == "dfme" and att["mode"] == "hard" and att["gen_steps"] > 0:
            # argmax responses carry no gradient for the generator
            raise ConfigError(f"{source}: field 'attacks.{i}.mode': hard-label dfme needs gen_steps 0")
    return cfg


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e})") from e
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: not valid {'JSON' if path.suffix == '.json' else 'YAML'} ({e})") from e
    raw = raw if raw is not None else {}
    if isinstance(raw, dict):
        if seed is not None:
            raw["seed"] = int(seed)
        if output_dir is not None:
            raw["output_dir"] = str(output_dir)
    return parse_config(raw, str(path))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(*blocks: Any) -> str:
    """Short stable digest of config blocks; keys checkpoint reuse."""
    return hashlib.sha256(canonical_json(list(blocks)).encode("utf-8")).hexdigest()[:16]
