"""Run configuration: JSON file, validated against a JSON schema before any compute."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from ..errors import ConfigError
from ..euler import FlowConfig
from ..geometry import BladeParams

OBJECTIVE_IDS = ("MassFlow", "PressureLossY")

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "mvadjoint run configuration",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "case": {
            "description": "Baseline bump geometry.",
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stagger_deg": {"type": "number", "description": "rotation about the area centroid, degrees"},
                "max_thickness": {"type": "number", "minimum": 0, "description": "peak thickness / chord"},
                "chord": {"type": "number", "exclusiveMinimum": 0},
                "bump_position": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1,
                                  "description": "chordwise location of peak thickness"},
            },
        },
        "grid": {
            "description": "Structured grid resolution (nodes) and surface node count.",
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ni": {"type": "integer", "minimum": 9},
                "nj": {"type": "integer", "minimum": 5},
                "n_surface": {"type": "integer", "minimum": 16,
                              "description": "bump surface nodes; the rest of ni goes to the flat walls"},
            },
        },
        "flow": {
            "description": "Flow conditions and pseudo-time controls (nondimensional, R = 1).",
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 1},
                "P01": {"type": "number", "exclusiveMinimum": 0},
                "T01": {"type": "number", "exclusiveMinimum": 0},
                "inlet_angle_deg": {"type": "number"},
                "p_exit": {"type": "number", "exclusiveMinimum": 0},
                "scheme": {"enum": ["implicit", "rk"]},
                "cfl": {"type": "number", "exclusiveMinimum": 0},
                "cfl_start": {"type": "number", "exclusiveMinimum": 0},
                "cfl_max": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "drop_orders": {"type": "number", "exclusiveMinimum": 0},
                "order": {"enum": [1, 2]},
                "entropy_fix": {"type": "number", "minimum": 0},
                "limiter_eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "objectives": {
            "type": "array", "minItems": 1, "uniqueItems": True,
            "items": {"enum": list(OBJECTIVE_IDS)},
        },
        "variants": {"enum": ["AD", "HD", "both"], "description": "adjoint variant(s) to run"},
        "adjoint": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "drop_orders": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "batch": {
            "description": "Samples of the validation campaign.",
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["eq1", "scans"],
                         "description": "eq1: the 12 parameter variations; scans: synthetic scans"},
                "size": {"type": "integer", "minimum": 0, "description": "number of scans"},
                "seed": {"type": "integer", "minimum": 0, "description": "seed of scan 0; scan k uses seed + k"},
                "xis": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "eq1_mesh": {"enum": ["regenerate", "morph"]},
                "sigma_field": {"type": "number", "minimum": 0, "description": "fraction of chord"},
                "correlation_length": {"type": "number", "exclusiveMinimum": 0},
                "sigma_meas": {"type": "number", "minimum": 0},
                "n_fem": {"type": "integer", "minimum": 2, "description": "measurement nodes on the profile"},
                "refine": {"type": "integer", "minimum": 1, "description": "scan points per CFD segment"},
                "inject_zero": {"type": "boolean", "description": "append a zero-deformation sample"},
            },
        },
        "clamp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "range": {"type": "array", "minItems": 2, "maxItems": 2,
                          "items": {"type": "number", "minimum": 0, "maximum": 1}},
            },
        },
        "fd_mode": {"enum": ["one-sided", "central"]},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
        "run_id": {"type": ["string", "null"]},
    },
}

DEFAULTS = {
    "case": {},
    "grid": {"ni": 121, "nj": 41, "n_surface": 41},
    "flow": {},
    "objectives": list(OBJECTIVE_IDS),
    "variants": "AD",
    "adjoint": {"drop_orders": 5.0, "max_iter": 1000},
    "batch": {"kind": "eq1", "size": 102, "seed": 0, "xis": [0.90, 0.95, 0.98, 1.02, 1.05, 1.10],
              "eq1_mesh": "regenerate", "sigma_field": 0.002, "correlation_length": 0.2,
              "sigma_meas": 2e-5, "n_fem": 60, "refine": 4, "inject_zero": False},
    "clamp": {"enabled": True, "range": [0.01, 0.99]},
    "fd_mode": "one-sided",
    "workers": 1,
    "output_dir": "runs",
    "run_id": None,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    data: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw):
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        data = _merge(DEFAULTS, raw)
        cfg = cls(copy.deepcopy(raw), data)
        try:
            cfg.blade_params()
            cfg.flow_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        lo, hi = data["clamp"]["range"]
        if lo > hi:
            raise ConfigError(f"clamp range {lo} > {hi}")
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(raw)

    def blade_params(self):
        return BladeParams(**self.data["case"])

    def flow_config(self):
        return FlowConfig(**self.data["flow"])

    @property
    def objectives(self):
        return list(self.data["objectives"])

    @property
    def variants(self):
        v = self.data["variants"]
        return ["AD", "HD"] if v == "both" else [v]

    def __getitem__(self, key):
        return self.data[key]

    def dump(self, path):
        """Persist the configuration verbatim (as given) plus the resolved defaults."""
        Path(path).write_text(json.dumps({"config": self.raw, "resolved": self.data}, indent=2))
