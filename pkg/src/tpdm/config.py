"""Run-configuration schema (JSON) shared by all CLI subcommands."""

from __future__ import annotations

import json

import jsonschema

_INT = {"type": "integer"}
_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_SHAPE = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


TASK = _obj(
    {
        "kind": {"enum": ["zsr", "csmri", "svct"]},
        "M": _POS_INT,
        "R": {"type": "number", "minimum": 1},
        "mask_seed": {"type": "integer", "minimum": 0},
        "center_frac": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "per_slice_masks": {"type": "boolean"},
        "n_angles": _POS_INT,
    },
    ["kind"],
)

SCHEDULE = _obj({"sigma_min": {"type": "number", "exclusiveMinimum": 0}, "sigma_max": _NUM})

PHANTOM = _obj(
    {
        "count": _POS_INT,
        "shape": _SHAPE,
        "n_ellipsoids": {"type": "integer", "minimum": 0},
        "first_index": {"type": "integer", "minimum": 0},
        "task": TASK,
        "noise_sigma": {"type": "number", "minimum": 0},
    },
    ["count", "shape"],
)

TRAIN = _obj(
    {
        "data": {"type": "string"},
        "iterations": {"type": "integer", "minimum": 0},
        "batch_size": _POS_INT,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "layers": {"type": "integer", "minimum": 2},
        "channels": _POS_INT,
        "dtype": {"enum": ["float32", "float64"]},
        "resume": {"type": "boolean"},
    },
    ["data", "iterations"],
)

MODEL = {
    "oneOf": [
        _obj({"checkpoint": {"type": "string"}}, ["checkpoint"]),
        _obj({"analytic": _obj({"mu": _NUM, "tau": {"type": "number", "exclusiveMinimum": 0}}, ["mu", "tau"])}, ["analytic"]),
    ]
}

MODELS = _obj({"primary": MODEL, "auxiliary": MODEL, "dtype": {"enum": ["float32", "float64"]}}, ["primary", "auxiliary"])

SAMPLER = _obj(
    {
        "N": {"type": "integer", "minimum": 2},
        "K": {"oneOf": [{"type": "number", "exclusiveMinimum": 1}, {"const": "inf"}]},
        "lambda": {"type": "number", "minimum": 0},
        "lambda_per_op_norm": {"type": "boolean"},
        "snr": {"type": "number", "exclusiveMinimum": 0},
        "corrector_steps": {"type": "integer", "minimum": 0},
        "guidance_mode": {"enum": ["exact_vjp", "identity_jacobian"]},
        "normalize_residual": {"type": "boolean"},
        "chunk": {"type": "integer", "minimum": 0},
    }
)

RECONSTRUCT = _obj(
    {
        "manifest": {"type": "string"},
        "index": {"type": "integer", "minimum": 0},
        "measurement": {"type": "string"},
        "task": TASK,
        "shape": _SHAPE,
        "ground_truth": {"type": "string"},
    }
)

GENERATE = _obj({"shape": _SHAPE, "export_pgm": {"type": "boolean"}}, ["shape"])

EVALUATE = _obj(
    {
        "pairs": {
            "type": "array",
            "minItems": 1,
            "items": _obj({"id": {"type": "string"}, "x": {"type": "string"}, "ref": {"type": "string"}}, ["x", "ref"]),
        },
        "data_range": {"type": "number", "exclusiveMinimum": 0},
    },
    ["pairs"],
)

RUN_CONFIG = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "threads": _POS_INT,
        "out": {"type": "string"},
        "schedule": SCHEDULE,
        "phantom": PHANTOM,
        "train": TRAIN,
        "models": MODELS,
        "sampler": SAMPLER,
        "reconstruct": RECONSTRUCT,
        "generate": GENERATE,
        "evaluate": EVALUATE,
    }
)

REQUIRED_SECTIONS = {
    "phantom": ["phantom"],
    "train": ["train"],
    "reconstruct": ["models", "reconstruct"],
    "generate": ["models", "generate"],
    "evaluate": ["evaluate"],
}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


def validate(cfg: dict, command: str | None = None) -> dict:
    try:
        jsonschema.validate(cfg, RUN_CONFIG)
    except jsonschema.ValidationError as exc:
        path = "$" + "".join(f"[{p!r}]" if isinstance(p, int) else f".{p}" for p in exc.absolute_path)
        raise ConfigError(exc.message, path) from None
    for section in REQUIRED_SECTIONS.get(command, []):
        if section not in cfg:
            raise ConfigError(f"section '{section}' is required for '{command}'", f"$.{section}")
    return cfg


def load(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc})") from None
