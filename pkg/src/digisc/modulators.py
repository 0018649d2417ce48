"""Discretisation of latents into constellation symbols, levels or codewords.

The functional layer (``scalar_quantize``, ``symbol_quantize``,
``vector_quantize``, the three gradient bridges, ``prob_modulate`` and
``bernoulli_bit_encode``) is stateless. ``build_link`` assembles those pieces
into an ``nn.Module`` that sits between encoder and decoder and also runs the
channel, so training and evaluation share one forward path.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import constellation as cst
from .channel import awgn
from .errors import ConfigurationError, FramingError

FAMILIES = ("scalar", "symbol", "vector", "probabilistic")
BRIDGES = ("ste", "soft-to-hard", "uniform-noise", "gumbel")
BIT_EPS = 1e-6


# ---------------------------------------------------------------- quantizers

def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def pam_levels(n_levels: int) -> np.ndarray:
    """Uniform, zero-centred levels with unit mean square."""
    if n_levels < 2 or n_levels & (n_levels - 1):
        raise ConfigurationError(f"number of levels must be a power of two >= 2, got {n_levels}")
    lv = np.arange(n_levels, dtype=np.float64) * 2 - (n_levels - 1)
    return lv / np.sqrt(np.mean(lv**2))


def check_levels(levels) -> torch.Tensor:
    lv = _as_tensor(levels).reshape(-1)
    n = lv.shape[0]
    if n < 2 or n & (n - 1):
        raise ConfigurationError(f"number of levels must be a power of two >= 2, got {n}")
    if not bool((lv[1:] > lv[:-1]).all()):
        raise ConfigurationError("levels must be strictly increasing")
    return lv


def scalar_quantize(v, levels):
    """Map each element to its nearest level (ties to the lower level).

    Returns ``(q, bits)`` where ``bits`` is the Gray-coded level index of each
    element, ``log2 L`` bits per element, as a flat uint8 array.
    """
    lv = check_levels(levels)
    x = _as_tensor(v)
    lv = lv.to(x.dtype)
    idx = cst.nearest_indices(x.unsqueeze(-1), lv.unsqueeze(-1))
    q = lv[idx]
    k = int(math.log2(lv.shape[0]))
    g = idx ^ (idx >> 1)
    shifts = torch.arange(k - 1, -1, -1)
    bits = ((g.reshape(-1, 1) >> shifts) & 1).to(torch.uint8).reshape(-1).numpy()
    if not isinstance(v, torch.Tensor):
        q = q.numpy()
    return q, bits


def scalar_bits_to_values(bits, levels):
    """Inverse of the bit stream produced by :func:`scalar_quantize`."""
    lv = check_levels(levels)
    k = int(math.log2(lv.shape[0]))
    b = np.asarray(bits, dtype=np.int64).reshape(-1)
    if b.size % k:
        raise FramingError(f"{b.size} bits do not split into {k}-bit level words")
    g = b.reshape(-1, k) @ (1 << np.arange(k - 1, -1, -1))
    idx = g.copy()
    shift = g >> 1
    while shift.any():
        idx ^= shift
        shift >>= 1
    return lv.numpy()[idx]


def symbol_quantize(v, c: cst.Constellation):
    """Pair the latent into I/Q symbols and snap each to its nearest point.

    Returns ``(indices, q)`` with ``q`` the un-paired reconstruction.
    """
    s = cst.pair_iq(v)
    pts = c.tensor(s.dtype) if isinstance(s, torch.Tensor) else c.points
    idx = cst.nearest_indices(s, pts)
    q = cst.unpair_iq(pts[idx])
    return idx, q


class VQLosses(NamedTuple):
    codebook: torch.Tensor
    commitment: torch.Tensor


def vector_quantize(v, codebook):
    """Replace each length-``b`` block of ``v`` by its nearest codeword.

    ``codebook`` is a ``(K, b)`` tensor. Returns ``(indices, q, losses)``; the
    codebook loss moves codewords toward (constant) blocks, the commitment
    loss moves blocks toward (constant) codewords.
    """
    cb = _as_tensor(codebook)
    x = _as_tensor(v).to(cb.dtype)
    k, b = cb.shape
    if k < 2 or k & (k - 1):
        raise ConfigurationError(f"codebook size must be a power of two, got {k}")
    if x.shape[-1] % b:
        raise ConfigurationError(f"latent length {x.shape[-1]} is not divisible by block size {b}")
    blocks = x.reshape(*x.shape[:-1], -1, b)
    idx = cst.nearest_indices(blocks, cb)
    chosen = cb[idx]
    losses = VQLosses(
        F.mse_loss(chosen, blocks.detach(), reduction="mean"),
        F.mse_loss(blocks, chosen.detach(), reduction="mean"),
    )
    return idx, chosen.reshape(x.shape), losses


# ---------------------------------------------------------------- bridges

def bridge_ste(x: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Forward value ``q`` exactly; identity Jacobian with respect to ``x``.

    ``x - x.detach()`` is exactly zero, so the sum is bit-identical to ``q``.
    Gradients also reach ``q`` itself, which lets learnable points train.
    """
    if x.shape != q.shape:
        raise ConfigurationError(f"bridge shapes differ: {tuple(x.shape)} vs {tuple(q.shape)}")
    return q + (x - x.detach())


class SoftAssignment(NamedTuple):
    weights: torch.Tensor
    soft: torch.Tensor


def soft_assign(x, targets, tau: float) -> SoftAssignment:
    """Softmax over ``-|x - t_j|^2 / tau``; ``soft`` is the weighted target mean."""
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau!r}")
    xt = _as_tensor(x)
    t = _as_tensor(targets).to(xt.dtype)
    w = torch.softmax(-cst.squared_distances(xt, t) / tau, dim=-1)
    return SoftAssignment(w, w @ t)


def bridge_noise(x: torch.Tensor, step: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Training-time proxy for rounding: add U(-step/2, step/2) per element."""
    if not step > 0:
        raise ConfigurationError(f"noise step must be positive, got {step!r}")
    u = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) - 0.5
    return x + step * u


# ---------------------------------------------------------------- probabilistic

def gumbel_noise(shape, generator=None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    e = (-torch.log(u.clamp_min(tiny))).clamp_min(tiny)
    return -torch.log(e)


def gumbel_softmax(logits: torch.Tensor, tau: float, generator=None, hard: bool = False, noise=None):
    """Relaxed one-hot sample; with ``hard`` the forward value is one-hot and
    the backward pass uses the relaxed weights."""
    if not tau > 0:
        raise ConfigurationError(f"temperature must be positive, got {tau!r}")
    g = gumbel_noise(logits.shape, generator, logits.dtype) if noise is None else noise
    y = torch.softmax((logits + g) / tau, dim=-1)
    if not hard:
        return y
    one_hot = F.one_hot(y.argmax(-1), y.shape[-1]).to(y.dtype)
    return one_hot + (y - y.detach())


class ProbSample(NamedTuple):
    symbols: torch.Tensor
    indices: torch.Tensor
    weights: torch.Tensor | None
    logits: torch.Tensor


def prob_modulate(
    logits: torch.Tensor,
    c: cst.Constellation | torch.Tensor,
    mode: str = "eval",
    tau: float = 1.0,
    generator=None,
    deterministic: bool = False,
    straight_through: bool = True,
) -> ProbSample:
    """Draw constellation symbols from per-slot categorical logits.

    ``logits`` has shape ``(..., M)``, one categorical per complex symbol slot.
    Eval mode draws a hard index (Gumbel-max, or argmax when
    ``deterministic``); train mode returns a Gumbel-softmax relaxation whose
    symbol is the weighted mean of the points.
    """
    pts = c.tensor(logits.dtype) if isinstance(c, cst.Constellation) else c
    if logits.shape[-1] != pts.shape[0]:
        raise ConfigurationError(
            f"head emits {logits.shape[-1]} logits per slot but the constellation has {pts.shape[0]} points"
        )
    if mode == "eval":
        if deterministic:
            idx = logits.argmax(-1)
        else:
            idx = (logits.detach() + gumbel_noise(logits.shape, generator, logits.dtype)).argmax(-1)
        return ProbSample(pts[idx], idx, None, logits)
    if mode != "train":
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    w = gumbel_softmax(logits, tau, generator, hard=straight_through)
    return ProbSample(w @ pts, w.detach().argmax(-1), w, logits)


def bernoulli_bit_encode(p, mode: str = "eval", tau: float = 1.0, generator=None) -> torch.Tensor:
    """Bits drawn from per-bit probabilities ``p`` (clamped to [eps, 1-eps]).

    Eval returns hard 0/1 samples; train returns a two-class Gumbel-softmax
    relaxation of P(bit = 1), kept strictly inside (0, 1).
    """
    pt = _as_tensor(p).clamp(BIT_EPS, 1.0 - BIT_EPS)
    if mode == "eval":
        u = torch.rand(pt.shape, generator=generator, dtype=pt.dtype)
        return (u < pt).to(pt.dtype)
    if mode != "train":
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits = torch.stack((torch.log(pt), torch.log1p(-pt)), dim=-1)
    y = gumbel_softmax(logits, tau, generator)[..., 0]
    return y.clamp(BIT_EPS, 1.0 - BIT_EPS)


# ---------------------------------------------------------------- config

@dataclass
class ModulatorConfig:
    family: str = "symbol"
    bridge: str = "ste"
    order: int = 16
    constellation: str = "square-qam"
    learnable: bool = False
    levels: int = 4
    codebook_size: int = 16
    block_dim: int = 2
    tau: float = 1.0
    beta: float = 0.25
    noise_step: float | None = None
    receiver: str = "hard"
    neural: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown modulator family {self.family!r}")
        if self.bridge not in BRIDGES:
            raise ConfigurationError(f"unknown bridge {self.bridge!r}")
        if (self.family == "probabilistic") != (self.bridge == "gumbel"):
            raise ConfigurationError("the probabilistic family uses the gumbel relaxation and only it does")
        if self.family == "vector" and self.bridge == "uniform-noise":
            raise ConfigurationError("uniform-noise bridge is not defined for vector quantisation")
        if self.neural and (self.family != "scalar" or self.bridge != "ste"):
            raise ConfigurationError("the neural bit quantiser is a scalar-family variant with the ste bridge")
        if self.constellation not in cst.KINDS:
            raise ConfigurationError(f"unknown constellation kind {self.constellation!r}")
        if self.receiver not in ("hard", "soft"):
            raise ConfigurationError(f"receiver must be 'hard' or 'soft', got {self.receiver!r}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau!r}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta!r}")
        if self.noise_step is not None and not self.noise_step > 0:
            raise ConfigurationError("noise_step must be positive")
        for name in ("order", "levels", "codebook_size"):
            n = getattr(self, name)
            if n < 2 or n & (n - 1):
                raise ConfigurationError(f"{name} must be a power of two >= 2, got {n}")
        if self.block_dim < 1:
            raise ConfigurationError("block_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModulatorConfig":
        return cls(**d)


# ---------------------------------------------------------------- links

class LinkOutput(NamedTuple):
    latent: torch.Tensor
    aux_loss: torch.Tensor
    tx_indices: torch.Tensor | None
    rx_indices: torch.Tensor | None


def _rx_snap(r: torch.Tensor, pts: torch.Tensor):
    """Hard ML detection with an identity gradient back to ``r``."""
    idx = cst.nearest_indices(r.detach(), pts.detach())
    return pts.detach()[idx] + (r - r.detach()), idx


class AnalogLink(nn.Module):
    """Full-resolution transmission: latent pairs go on air unquantised."""

    def forward(self, z, snr_db, generator=None) -> LinkOutput:
        if snr_db == math.inf:
            # identity channel: skip the pairing round trip so the latent is exact
            return LinkOutput(z, z.new_zeros(()), None, None)
        r = awgn(cst.pair_iq(z), snr_db, generator)
        return LinkOutput(cst.unpair_iq(r), z.new_zeros(()), None, None)


class ConstellationLink(nn.Module):
    """Symbol quantisation (and probabilistic sampling) against a 2-D constellation.

    Learnable constellations keep their free parameters in ``gap_logs``
    (square grids) or ``raw_points`` (irregular); ``points()`` always returns
    a unit-energy set.
    """

    def __init__(self, cfg: ModulatorConfig, c: cst.Constellation):
        super().__init__()
        if c.order != cfg.order:
            raise ConfigurationError(f"modulator order {cfg.order} but constellation has {c.order} points")
        self.cfg = cfg
        self.kind = c.kind
        self.labels = c.labels
        self._source = c
        self.temperature = cfg.tau
        self.learnable = cfg.learnable
        if cfg.learnable and c.kind != "irregular":
            side = math.isqrt(c.order)
            levels = np.unique(np.round(c.points[:, 0], 12))
            if levels.size != side:
                raise ConfigurationError("learnable square grid needs a constellation with a square level set")
            self.gap_logs = nn.Parameter(torch.log(torch.as_tensor(np.diff(levels))))
        elif cfg.learnable:
            self.raw_points = nn.Parameter(torch.as_tensor(c.points.copy()))
        else:
            self.register_buffer("fixed_points", torch.as_tensor(c.points.copy()))
        self.head = SlotLogitHead(c.points) if cfg.family == "probabilistic" else None

    def points(self) -> torch.Tensor:
        if hasattr(self, "gap_logs"):
            return grid_points(self.gap_logs)
        if hasattr(self, "raw_points"):
            p = self.raw_points
            return p / torch.sqrt(torch.mean(torch.sum(p**2, -1)))
        return self.fixed_points

    @torch.no_grad()
    def renormalize_(self) -> None:
        if hasattr(self, "raw_points"):
            self.raw_points.copy_(self.points())

    def constellation(self) -> cst.Constellation:
        if not self.learnable:
            # the buffer may have been cast to float32; keep the exact design
            return self._source
        pts = self.points().detach().double().numpy()
        pts = pts / np.sqrt(np.mean(np.sum(pts**2, axis=1)))
        return cst.Constellation(pts, self.labels, self.kind)

    def noise_step(self) -> float:
        if self.cfg.noise_step is not None:
            return self.cfg.noise_step
        pts = self.points().detach().double().numpy()
        d = np.sqrt(cst.squared_distances(pts, pts))
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    def forward(self, z, snr_db, generator=None) -> LinkOutput:
        pts = self.points().to(z.dtype)
        s = cst.pair_iq(z)
        aux = z.new_zeros(())
        if self.head is not None:
            mode = "train" if self.training else "eval"
            sample = prob_modulate(self.head(s), pts, mode, self.temperature, generator)
            tx_idx, y = sample.indices, sample.symbols
        else:
            tx_idx = cst.nearest_indices(s.detach(), pts.detach())
            q = pts[tx_idx]
            if not self.training:
                y = q.detach()
            elif self.cfg.bridge == "ste":
                y = bridge_ste(s, q)
            elif self.cfg.bridge == "soft-to-hard":
                y = soft_assign(s, pts, self.temperature).soft
            else:
                y = bridge_noise(s, self.noise_step(), generator)
        r = awgn(y, snr_db, generator, check_power=False)
        if self.cfg.receiver == "hard":
            r, rx_idx = _rx_snap(r, pts)
        else:
            rx_idx = cst.nearest_indices(r.detach(), pts.detach())
        return LinkOutput(cst.unpair_iq(r), aux, tx_idx, rx_idx)


def grid_points(gap_logs: torch.Tensor) -> torch.Tensor:
    return cst.grid_points_from_gaps(torch.exp(gap_logs))


class SlotLogitHead(nn.Module):
    """Shared affine map from each (I, Q) slot to M categorical logits.

    Initialised so that the logits equal ``-|s - c_j|^2 / scale`` up to a
    per-slot constant, i.e. a nearest-point soft assignment.
    """

    def __init__(self, points: np.ndarray, scale: float = 0.1):
        super().__init__()
        pts = torch.tensor(np.array(points), dtype=torch.float64)
        self.linear = nn.Linear(2, pts.shape[0])
        with torch.no_grad():
            self.linear.weight.copy_(2 * pts / scale)
            self.linear.bias.copy_(-(pts**2).sum(-1) / scale)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        return self.linear(s)


class ScalarLink(nn.Module):
    """Per-element PAM quantisation; element pairs travel as square-QAM symbols."""

    def __init__(self, cfg: ModulatorConfig):
        super().__init__()
        self.cfg = cfg
        self.temperature = cfg.tau
        self.register_buffer("levels", torch.as_tensor(pam_levels(cfg.levels)))

    def forward(self, z, snr_db, generator=None) -> LinkOutput:
        lv = self.levels.to(z.dtype)
        col = lv.unsqueeze(-1)
        idx = cst.nearest_indices(z.detach().unsqueeze(-1), col)
        q = lv[idx]
        if not self.training:
            y = q
        elif self.cfg.bridge == "ste":
            y = bridge_ste(z, q)
        elif self.cfg.bridge == "soft-to-hard":
            y = soft_assign(z.unsqueeze(-1), col, self.temperature).soft.squeeze(-1)
        else:
            step = self.cfg.noise_step or float(lv[1] - lv[0])
            y = bridge_noise(z, step, generator)
        r = cst.unpair_iq(awgn(cst.pair_iq(y), snr_db, generator, check_power=False))
        rx_idx = cst.nearest_indices(r.detach().unsqueeze(-1), col)
        if self.cfg.receiver == "hard":
            r = lv[rx_idx] + (r - r.detach())
        return LinkOutput(r, z.new_zeros(()), idx, rx_idx)


class NeuralBitQuantizer(nn.Module):
    """Affine layer + sign threshold producing one bit per latent element.

    Bits travel as antipodal +-1 values (BPSK per real dimension) and an
    affine dequantiser maps them back to a latent.
    """

    def __init__(self, dim: int, n_bits: int | None = None):
        super().__init__()
        n_bits = n_bits or dim
        self.to_bits = nn.Linear(dim, n_bits)
        self.from_bits = nn.Linear(n_bits, dim)

    def quantize(self, v: torch.Tensor):
        a = self.to_bits(v)
        hard = (a > 0).to(a.dtype)
        soft = torch.sigmoid(a)
        return hard + (soft - soft.detach()), hard.detach().to(torch.uint8)

    def dequantize(self, bits: torch.Tensor) -> torch.Tensor:
        return self.from_bits(2 * bits - 1)


class NeuralBitLink(nn.Module):
    def __init__(self, cfg: ModulatorConfig, dim: int):
        super().__init__()
        self.cfg = cfg
        self.temperature = cfg.tau
        self.quantizer = NeuralBitQuantizer(dim)

    def forward(self, z, snr_db, generator=None) -> LinkOutput:
        b, hard = self.quantizer.quantize(z)
        x = (2 * b - 1) / math.sqrt(2.0)
        r = cst.unpair_iq(awgn(cst.pair_iq(x), snr_db, generator, check_power=False)) / math.sqrt(2.0)
        rx = (r.detach() > 0).to(r.dtype)
        b_hat = rx + (b - b.detach())
        return LinkOutput(self.quantizer.dequantize(b_hat), z.new_zeros(()), hard.long(), rx.long())


class VectorLink(nn.Module):
    """VQ over latent blocks; codeword indices go out as bits on square QAM."""

    def __init__(self, cfg: ModulatorConfig, dim: int, seed: int = 0):
        super().__init__()
        if dim % cfg.block_dim:
            raise ConfigurationError(f"latent length {dim} not divisible by block_dim {cfg.block_dim}")
        self.cfg = cfg
        self.temperature = cfg.tau
        g = torch.Generator().manual_seed(seed)
        self.codebook = nn.Parameter(torch.randn(cfg.codebook_size, cfg.block_dim, generator=g, dtype=torch.float64))
        self.carrier = cst.make_square_qam(cfg.order)
        self.k_bits = int(math.log2(cfg.codebook_size))
        n_bits = dim // cfg.block_dim * self.k_bits
        if n_bits % self.carrier.bits_per_symbol:
            raise ConfigurationError(
                f"{n_bits} index bits per latent do not fill whole {cfg.order}-QAM symbols"
            )

    @torch.no_grad()
    def init_codebook(self, latents: torch.Tensor, seed: int = 0) -> None:
        blocks = latents.detach().double().reshape(-1, self.cfg.block_dim).numpy()
        km = cst.lloyd_kmeans(blocks, self.cfg.codebook_size, seed=seed, max_iters=50)
        self.codebook.copy_(torch.as_tensor(km.centroids))

    def forward(self, z, snr_db, generator=None) -> LinkOutput:
        cb = self.codebook.to(z.dtype)
        idx, q, losses = vector_quantize(z, cb)
        aux = losses.codebook + self.cfg.beta * losses.commitment
        shape = idx.shape
        k = self.k_bits
        shifts = torch.arange(k - 1, -1, -1)
        bits = ((idx.reshape(-1, 1) >> shifts) & 1).reshape(shape[0], -1)
        pts = self.carrier.tensor(z.dtype)
        sym_idx = torch.as_tensor(
            cst.bits_to_indices(self.carrier, bits.numpy().reshape(-1))
        ).reshape(shape[0], -1)
        r = awgn(pts[sym_idx], snr_db, generator, check_power=False)
        rx_sym = cst.nearest_indices(r, pts)
        rx_bits = torch.as_tensor(cst.indices_to_bits(self.carrier, rx_sym.numpy())).reshape(shape[0], -1)
        weights = 1 << shifts
        rx_idx = (rx_bits.reshape(*shape, k).long() * weights).sum(-1)
        q_rx = cb.detach()[rx_idx].reshape(z.shape)
        if not self.training:
            y = q_rx
        elif self.cfg.bridge == "ste":
            y = bridge_ste(z, q_rx)
        else:
            blocks = z.reshape(*shape, -1)
            soft = soft_assign(blocks, cb, self.temperature).soft.reshape(z.shape)
            y = soft + (q_rx - q.detach())
        return LinkOutput(y, aux, idx, rx_idx)


def build_link(cfg: ModulatorConfig | None, dim: int, c: cst.Constellation | None = None, seed: int = 0) -> nn.Module:
    """Link module for a modulator config; ``None`` gives the analog link."""
    if cfg is None:
        return AnalogLink()
    if cfg.family in ("symbol", "probabilistic"):
        if c is None:
            c = cst.make_square_qam(cfg.order)
        return ConstellationLink(cfg, c)
    if cfg.family == "scalar":
        return NeuralBitLink(cfg, dim) if cfg.neural else ScalarLink(cfg)
    return VectorLink(cfg, dim, seed)
