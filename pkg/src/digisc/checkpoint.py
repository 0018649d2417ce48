"""Self-describing checkpoint container.

A checkpoint is a safetensors file. Model parameters are stored under
``model.*`` and modulator state under ``link.*``; everything else
(architecture, stage tag, seed, config snapshot, modulator config,
constellation, per-epoch history) lives in one canonical-JSON metadata entry so
that identical content always serialises to identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from . import constellation as cst
from .errors import ConfigurationError, MissingFileError, StageMismatchError
from .latent_model import Architecture, JSCCModel
from .modulators import ModulatorConfig, build_link

FORMAT_NAME = "digisc-checkpoint"
FORMAT_VERSION = 1
STAGES = ("analog", "digital")
_META_KEY = "digisc"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


@dataclass
class Checkpoint:
    arch: Architecture
    model_state: dict
    stage: str
    seed: int
    train_config: dict = field(default_factory=dict)
    modulator: dict | None = None
    constellation: dict | None = None
    link_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown training stage {self.stage!r}")
        if self.stage == "digital" and self.modulator is None:
            raise StageMismatchError("digital checkpoints must carry a modulator config")

    def metadata(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "format_version": FORMAT_VERSION,
            "architecture": self.arch.to_dict(),
            "stage": self.stage,
            "seed": int(self.seed),
            "train_config": self.train_config,
            "modulator": self.modulator,
            "constellation": self.constellation,
            "history": self.history,
        }

    def modulator_config(self) -> ModulatorConfig | None:
        return None if self.modulator is None else ModulatorConfig.from_dict(self.modulator)

    def get_constellation(self) -> cst.Constellation | None:
        return None if self.constellation is None else cst.constellation_from_dict(self.constellation)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.detach().cpu().contiguous().clone() for k, v in ckpt.model_state.items()}
    tensors.update({f"link.{k}": v.detach().cpu().contiguous().clone() for k, v in ckpt.link_state.items()})
    save_file(tensors, str(path), metadata={_META_KEY: canonical_json(ckpt.metadata())})
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as f:
        raw = (f.metadata() or {}).get(_META_KEY)
        if raw is None:
            raise ConfigurationError(f"{path} is not a digisc checkpoint")
        meta = json.loads(raw)
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    if meta.get("format") != FORMAT_NAME or meta.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format in {path}")
    return Checkpoint(
        arch=Architecture.from_dict(meta["architecture"]),
        model_state={k[6:]: v for k, v in tensors.items() if k.startswith("model.")},
        stage=meta["stage"],
        seed=meta["seed"],
        train_config=meta["train_config"],
        modulator=meta["modulator"],
        constellation=meta["constellation"],
        link_state={k[5:]: v for k, v in tensors.items() if k.startswith("link.")},
        history=meta["history"],
    )


def restore(ckpt: Checkpoint, dtype=torch.float32):
    """Rebuild ``(model, link)`` from a checkpoint; both in eval mode."""
    model = JSCCModel(ckpt.arch)
    model.load_state_dict(ckpt.model_state)
    link = build_link(ckpt.modulator_config(), ckpt.arch.latent_dim, ckpt.get_constellation(), ckpt.seed)
    if ckpt.link_state:
        link.load_state_dict(ckpt.link_state)
    return model.to(dtype).eval(), link.to(dtype).eval()
