"""Experiment configuration: a YAML document validated against a strict JSON
schema, merged over defaults, and snapshotted as canonical JSON."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import yaml

from .channel import ChannelConfig
from .data import DatasetSpec
from .errors import MissingFileError, SchemaError
from .latent_model import Architecture
from .modulators import BRIDGES, FAMILIES, ModulatorConfig
from .constellation import KINDS
from .evaluation import SCHEMES
from .training import DEFAULT_SNR_GRID, LR_SCHEDULES

CONFIG_VERSION = 1

DEFAULTS = {
    "version": CONFIG_VERSION,
    "model": {"image_shape": [32, 32, 3], "channels": [32, 64, 64], "latent_dim": 512},
    "train": {
        "analog": {"epochs": 40, "batch_size": 64, "lr": 1e-3},
        "digital": {"epochs": 20, "batch_size": 64, "lr": 1e-4},
        "direct": {"epochs": 20, "batch_size": 64, "lr": 1e-3},
        "tau_start": 1.0,
        "tau_end": 0.01,
        "lr_schedule": "cosine",
        "debug": False,
    },
    "modulator": {
        "family": "symbol",
        "bridge": "ste",
        "order": 16,
        "constellation": "square-qam",
        "learnable": False,
        "levels": 4,
        "codebook_size": 16,
        "block_dim": 2,
        "tau": 1.0,
        "beta": 0.25,
        "noise_step": None,
        "receiver": "hard",
        "neural": False,
    },
    "constellation": {"design_images": 1000, "max_iters": 100, "min_bank_factor": 10},
    "channel": {"kind": "awgn", "snr_grid": list(DEFAULT_SNR_GRID), "p": None},
    "eval": {
        "schemes": ["analog", "ste-direct", "ste-finetune", "ste-irregular"],
        "orders": [4, 16, 64],
        "n_images": 1000,
        "batch_size": 250,
        "multiround": {"rounds": 5, "snr_db": 10.0, "n_images": 500, "order": 16},
    },
    "io": {"dataset": "cifar10", "data_root": None, "train_size": 10000, "test_size": 1000, "out_dir": "runs"},
}

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_pow2 = {"type": "integer", "enum": [2 ** k for k in range(1, 13)]}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


def _stage(lr_min=0):
    return _obj({"epochs": _nonneg_int, "batch_size": _pos_int, "lr": {"type": "number", "minimum": lr_min}})


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "digisc experiment config",
    **_obj(
        {
            "version": {"const": CONFIG_VERSION},
            "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
            "model": _obj(
                {
                    "image_shape": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                    "channels": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                    "latent_dim": _pos_int,
                }
            ),
            "train": _obj(
                {
                    "analog": _stage(),
                    "digital": _stage(),
                    "direct": _stage(),
                    "tau_start": _pos_num,
                    "tau_end": _pos_num,
                    "lr_schedule": {"enum": list(LR_SCHEDULES)},
                    "debug": {"type": "boolean"},
                }
            ),
            "modulator": _obj(
                {
                    "family": {"enum": list(FAMILIES)},
                    "bridge": {"enum": list(BRIDGES)},
                    "order": _pow2,
                    "constellation": {"enum": list(KINDS)},
                    "learnable": {"type": "boolean"},
                    "levels": _pow2,
                    "codebook_size": _pow2,
                    "block_dim": _pos_int,
                    "tau": _pos_num,
                    "beta": {"type": "number", "minimum": 0},
                    "noise_step": {"oneOf": [{"type": "null"}, _pos_num]},
                    "receiver": {"enum": ["hard", "soft"]},
                    "neural": {"type": "boolean"},
                }
            ),
            "constellation": _obj(
                {"design_images": _pos_int, "max_iters": _pos_int, "min_bank_factor": _pos_int}
            ),
            "channel": _obj(
                {
                    "kind": {"enum": ["awgn", "bsc", "bec"]},
                    "snr_grid": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    "p": {"oneOf": [{"type": "null"}, {"type": "number", "minimum": 0, "maximum": 1}]},
                }
            ),
            "eval": _obj(
                {
                    "schemes": {"type": "array", "items": {"enum": list(SCHEMES)}, "minItems": 1, "uniqueItems": True},
                    "orders": {"type": "array", "items": _pow2, "minItems": 1, "uniqueItems": True},
                    "n_images": _pos_int,
                    "batch_size": _pos_int,
                    "multiround": _obj(
                        {"rounds": _pos_int, "snr_db": {"type": "number"}, "n_images": _pos_int, "order": _pow2}
                    ),
                }
            ),
            "io": _obj(
                {
                    "dataset": {"enum": ["cifar10", "synthetic", "folder"]},
                    "data_root": {"type": ["string", "null"]},
                    "train_size": _pos_int,
                    "test_size": _pos_int,
                    "out_dir": {"type": "string"},
                }
            ),
        },
        required=("version", "seed"),
    ),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"config invalid at {where}: {exc.message}") from None


def resolve(doc: dict, seed_override: int | None = None) -> dict:
    """Validate a user document and return the fully resolved config."""
    if not isinstance(doc, dict):
        raise SchemaError("config must be a mapping")
    if seed_override is not None:
        doc = {**doc, "seed": int(seed_override)}
    validate(doc)
    cfg = _merge(DEFAULTS, doc)
    validate(cfg)
    # construct the typed views once so semantic errors surface before any work
    model_arch(cfg)
    modulator_config(cfg)
    channel_config(cfg)
    return cfg


def load_config(path, seed_override: int | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"config not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise SchemaError(f"config is not valid YAML: {exc}") from None
    return resolve(doc or {}, seed_override)


def snapshot(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=1) + "\n"


def model_arch(cfg: dict) -> Architecture:
    m = cfg["model"]
    return Architecture(tuple(m["image_shape"]), tuple(m["channels"]), m["latent_dim"])


def modulator_config(cfg: dict, **overrides) -> ModulatorConfig:
    return ModulatorConfig(**{**cfg["modulator"], **overrides})


def channel_config(cfg: dict, snr_db: float | None = None) -> ChannelConfig:
    ch = cfg["channel"]
    if ch["kind"] == "awgn":
        return ChannelConfig("awgn", snr_db=float(snr_db if snr_db is not None else ch["snr_grid"][0]), seed=cfg["seed"])
    return ChannelConfig(ch["kind"], p=ch["p"], seed=cfg["seed"])


def dataset_spec(cfg: dict) -> DatasetSpec:
    io = cfg["io"]
    return DatasetSpec(io["dataset"], io["data_root"], io["train_size"], io["test_size"])
