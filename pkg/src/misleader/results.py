"""ResultsRecord schema and IO.

A results file is one JSON object. Fields that could not be produced are set
to null and explained in ``null_reasons`` keyed by the dotted field path.
Timing lives only under ``wall_clock`` so two runs of the same config can be
compared with :func:`strip_wall_clock`.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .config import validate_against
from .errors import ConfigError

_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_PROB_OR_NULL = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

_CHECK = {
    "type": "object",
    "required": ["name", "lhs", "rhs", "holds"],
    "properties": {
        "name": {"type": "string"},
        "lhs": {"type": "number"},
        "rhs": {"type": "number"},
        "holds": {"type": "boolean"},
        "details": {"type": "object"},
    },
}

_THEORY_REPORT = {
    "type": ["object", "null"],
    "required": ["checks", "holds"],
    "properties": {"checks": {"type": "array", "items": _CHECK}, "holds": {"type": "boolean"}},
}

RESULTS_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ResultsRecord",
    "type": "object",
    "required": ["artifact_version", "config", "config_hash", "dataset", "target", "defense",
                 "attacks", "theory", "null_reasons", "wall_clock"],
    "properties": {
        "artifact_version": {"type": "string"},
        "config": {"type": "object"},
        "config_hash": {"type": "string"},
        "dataset": {
            "type": "object",
            "required": ["name", "n_train", "n_test", "input_shape", "num_classes"],
            "properties": {
                "name": {"type": "string"},
                "n_train": {"type": "integer", "minimum": 0},
                "n_test": {"type": "integer", "minimum": 0},
                "input_shape": {"type": "array", "items": {"type": "integer"}},
                "num_classes": {"type": "integer", "minimum": 1},
                "surrogate": {"type": ["string", "null"]},
            },
        },
        "target": {
            "type": "object",
            "required": ["arch", "test_accuracy"],
            "properties": {"arch": {"type": "string"}, "test_accuracy": _PROB},
        },
        "defense": {
            "type": "object",
            "required": ["members", "ensemble", "randp"],
            "properties": {
                "members": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["index", "arch", "test_accuracy", "agreement"],
                        "properties": {
                            "index": {"type": "integer"},
                            "arch": {"type": "string"},
                            "test_accuracy": _PROB,
                            "agreement": _PROB,
                        },
                    },
                },
                "ensemble": {
                    "type": "object",
                    "required": ["test_accuracy", "agreement"],
                    "properties": {"test_accuracy": _PROB, "agreement": _PROB},
                },
                "randp": {
                    "type": "object",
                    "required": ["budget_l1", "test_accuracy", "agreement"],
                    "properties": {"budget_l1": {"type": "number"}, "test_accuracy": _PROB,
                                   "agreement": _PROB},
                },
            },
        },
        "attacks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["attack_index", "kind", "mode", "budget", "oracle", "defense_arch",
                             "clone_arch", "clone_accuracy", "agreement", "queries_used", "truncated"],
                "properties": {
                    "attack_index": {"type": "integer", "minimum": 0},
                    "kind": {"enum": ["dbme", "dfme"]},
                    "mode": {"enum": ["soft", "hard"]},
                    "budget": {"type": "integer", "minimum": 1},
                    "oracle": {"type": "string"},
                    "defense_arch": {"type": "string"},
                    "clone_arch": {"type": "string"},
                    "seed": {"type": "integer"},
                    "clone_accuracy": _PROB_OR_NULL,
                    "agreement": _PROB_OR_NULL,
                    "queries_used": {"type": "integer", "minimum": 0},
                    "truncated": {"type": "boolean"},
                    "clone_checkpoint": {"type": ["string", "null"]},
                },
            },
        },
        "theory": {
            "type": ["object", "null"],
            "properties": {"minimax_gap": _THEORY_REPORT, "df_gap": _THEORY_REPORT},
        },
        "null_reasons": {"type": "object", "additionalProperties": {"type": "string"}},
        "wall_clock": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}


def validate_results(record: dict, source: str = "results") -> None:
    validate_against(RESULTS_SCHEMA, record, source)
    for i, att in enumerate(record["attacks"]):
        for key in ("clone_accuracy", "agreement"):
            if att[key] is None and f"attacks.{i}.{key}" not in record["null_reasons"]:
                raise ConfigError(f"{source}: field 'attacks.{i}.{key}': null without a reason")
    if record["theory"] is None and "theory" not in record["null_reasons"]:
        raise ConfigError(f"{source}: field 'theory': null without a reason")


def write_results(record: dict, path) -> Path:
    validate_results(record, str(path))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    return path


def read_results(path) -> dict:
    path = Path(path)
    try:
        record = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"{path}: cannot read results ({e})") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}") from e
    validate_results(record, str(path))
    return record


def strip_wall_clock(record: dict) -> dict:
    out = copy.deepcopy(record)
    out.pop("wall_clock", None)
    return out
