"""Multistage training: analog pretraining, K-means constellation design from
the pretrained encoder, and digital fine-tuning (or direct digital training
from scratch) behind a chosen modulator and gradient bridge."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import constellation as cst
from .checkpoint import Checkpoint, restore
from .errors import ConfigurationError, DivergenceError, StageMismatchError
from .latent_model import Architecture, JSCCModel, build_model
from .modulators import ConstellationLink, ModulatorConfig, VectorLink, build_link
from .seeding import derive_seed, numpy_rng, torch_generator

log = logging.getLogger(__name__)

DEFAULT_SNR_GRID = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0)
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    stage: str = "analog"
    epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    snr_grid: tuple[float, ...] = DEFAULT_SNR_GRID
    modulator: ModulatorConfig | None = None
    tau_start: float = 1.0
    tau_end: float = 0.01
    lr_schedule: str = "cosine"
    debug: bool = False

    def __post_init__(self):
        if self.stage not in ("analog", "digital"):
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if not self.snr_grid:
            raise ConfigurationError("snr_grid must not be empty")
        if self.stage == "digital" and self.modulator is None:
            raise ConfigurationError("digital training needs a modulator config")
        if self.stage == "analog" and self.modulator is not None:
            raise ConfigurationError("analog training takes no modulator")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not (self.tau_start > 0 and self.tau_end > 0):
            raise ConfigurationError("temperatures must be positive")
        self.snr_grid = tuple(float(s) for s in self.snr_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_grid"] = list(self.snr_grid)
        return d


def tau_schedule(epoch: int, epochs: int, start: float, end: float) -> float:
    """Exponential decay from ``start`` (first epoch) to ``end`` (last epoch)."""
    if epochs <= 1:
        return start
    if epoch == epochs - 1:
        return end
    return start * (end / start) ** (epoch / (epochs - 1))


def lr_at(epoch: int, epochs: int, base: float, schedule: str = "cosine") -> float:
    """Per-epoch learning rate; cosine decays from ``base`` towards zero."""
    if schedule == "constant" or epochs <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s : s + batch_size]


def _step_loss(model, link, x, snr_db, gen):
    out = link(model.encode(x), snr_db, gen)
    return F.mse_loss(model.decode(out.latent), x) + out.aux_loss


def probe_loss(model, link, images, seed: int, snr_db: float = 10.0) -> float:
    """Eval-mode loss on fixed images with a fixed noise seed."""
    was = model.training, link.training
    model.eval()
    link.eval()
    with torch.no_grad():
        x = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
        loss = float(_step_loss(model, link, x, snr_db, torch_generator(derive_seed(seed, "probe"))))
    model.train(was[0])
    link.train(was[1])
    return loss


def _train_loop(model: JSCCModel, link, cfg: TrainConfig, data: np.ndarray) -> list[dict]:
    images = torch.as_tensor(np.asarray(data), dtype=next(model.parameters()).dtype)
    if images.shape[0] == 0:
        raise ConfigurationError("no training images")
    batch_rng = numpy_rng(derive_seed(cfg.seed, "batches"))
    snr_rng = numpy_rng(derive_seed(cfg.seed, "snr"))
    gen = torch_generator(derive_seed(cfg.seed, "noise"))
    params = list(model.parameters()) + list(link.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    history = []
    model.train()
    link.train()
    for epoch in range(cfg.epochs):
        tau = tau_schedule(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end)
        link.temperature = tau
        lr = lr_at(epoch, cfg.epochs, cfg.lr, cfg.lr_schedule)
        for g in opt.param_groups:
            g["lr"] = lr
        losses = []
        for idx in _batches(images.shape[0], cfg.batch_size, batch_rng):
            snr = float(cfg.snr_grid[snr_rng.integers(len(cfg.snr_grid))])
            loss = _step_loss(model, link, images[idx], snr, gen)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch} (snr {snr} dB, tau {tau})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if isinstance(link, ConstellationLink):
                link.renormalize_()
                if cfg.debug:
                    p = float(torch.mean(torch.sum(link.points().detach().double() ** 2, -1)))
                    if abs(p - 1.0) > 1e-6:
                        raise AssertionError(f"constellation power drifted to {p}")
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "tau": tau, "lr": lr, "step_losses": losses}
        history.append(rec)
        log.info("epoch %d loss %.6f tau %.4g", epoch, rec["loss"], tau)
    model.eval()
    link.eval()
    return history


def _finish(model, link, cfg: TrainConfig, data, stage: str, extra_cfg: dict | None, history: list) -> Checkpoint:
    n_probe = min(cfg.batch_size, len(data))
    final = probe_loss(model, link, np.asarray(data)[:n_probe], cfg.seed)
    hist = [{k: v for k, v in h.items() if k != "step_losses"} for h in history]
    hist.append({"final_loss": final})
    mod = cfg.modulator
    c = link.constellation() if isinstance(link, ConstellationLink) else None
    train_cfg = cfg.to_dict()
    if extra_cfg:
        train_cfg.update(extra_cfg)
    return Checkpoint(
        arch=model.arch,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        stage=stage,
        seed=cfg.seed,
        train_config=train_cfg,
        modulator=None if mod is None else mod.to_dict(),
        constellation=None if c is None else cst.constellation_to_dict(c),
        link_state={k: v.detach().clone() for k, v in link.state_dict().items()},
        history=hist,
    )


def init_checkpoint(arch: Architecture, seed: int) -> Checkpoint:
    model = build_model(arch, seed)
    return Checkpoint(arch, {k: v.clone() for k, v in model.state_dict().items()}, "analog", seed)


def pretrain_analog(cfg: TrainConfig, data, arch: Architecture = Architecture()) -> Checkpoint:
    """Train encoder/decoder end to end through power normalisation and AWGN."""
    if cfg.stage != "analog":
        raise StageMismatchError("pretrain_analog needs stage 'analog'")
    model = build_model(arch, cfg.seed)
    link = build_link(None, arch.latent_dim)
    history = _train_loop(model, link, cfg, data)
    return _finish(model, link, cfg, data, "analog", None, history)


def encode_dataset(model: JSCCModel, images, batch_size: int = 500) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        return torch.cat([model.encode(x[s : s + batch_size]) for s in range(0, x.shape[0], batch_size)])


def design_constellation(
    ckpt: Checkpoint, images, order: int, seed: int = 0, max_iters: int = 100, min_bank_factor: int = 10
) -> cst.Constellation:
    """K-means irregular constellation fitted to the analog encoder's I/Q pairs."""
    if ckpt.stage != "analog":
        raise StageMismatchError("constellation design needs an analog-stage checkpoint")
    model, _ = restore(ckpt)
    bank = cst.make_bank(encode_dataset(model, images))
    return cst.kmeans_constellation(bank, order, seed=seed, max_iters=max_iters, min_bank_factor=min_bank_factor)


def _constellation_for(mod: ModulatorConfig, c: cst.Constellation | None) -> cst.Constellation | None:
    if mod.family not in ("symbol", "probabilistic"):
        return None
    if c is not None:
        return c
    if mod.constellation == "square-qam":
        return cst.make_square_qam(mod.order)
    if mod.constellation == "learnable-spacing":
        return cst.make_learnable_spacing(mod.order)
    raise ConfigurationError("an irregular constellation must be supplied (run design_constellation first)")


def _digital(model: JSCCModel, cfg: TrainConfig, data, c, source: str) -> Checkpoint:
    if cfg.stage != "digital" or cfg.modulator is None:
        raise StageMismatchError("digital training needs stage 'digital' and a modulator")
    mod = cfg.modulator
    c = _constellation_for(mod, c)
    link = build_link(mod, model.arch.latent_dim, c, seed=cfg.seed)
    if isinstance(link, VectorLink):
        n = min(len(data), 2000)
        link.init_codebook(encode_dataset(model, np.asarray(data)[:n]), seed=cfg.seed)
    link = link.to(next(model.parameters()).dtype)
    history = _train_loop(model, link, cfg, data)
    return _finish(model, link, cfg, data, "digital", {"init": source}, history)


def finetune_digital(ckpt: Checkpoint, cfg: TrainConfig, data, c: cst.Constellation | None = None) -> Checkpoint:
    """Insert the modulator after a pretrained encoder and keep training."""
    model, old_link = restore(ckpt)
    if ckpt.stage == "digital":
        if ckpt.modulator != (cfg.modulator.to_dict() if cfg.modulator else None):
            raise StageMismatchError("continued digital tuning must keep the checkpoint's modulator")
        c = c or ckpt.get_constellation()
    out = _digital(model, cfg, data, c, f"{ckpt.stage}-checkpoint")
    if ckpt.stage == "digital" and cfg.epochs == 0:
        out.link_state = {k: v.clone() for k, v in old_link.state_dict().items()}
    return out


def train_digital_direct(cfg: TrainConfig, data, arch: Architecture = Architecture(), c: cst.Constellation | None = None) -> Checkpoint:
    """Digital training from random initialisation."""
    return _digital(build_model(arch, cfg.seed), cfg, data, c, "random")
