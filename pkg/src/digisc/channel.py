"""AWGN, binary symmetric and binary erasure channels.

SNR is per complex symbol with the transmit energy fixed at 1, so the complex
noise variance is ``10 ** (-snr_db / 10)``, split evenly over I and Q.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigurationError, PowerContractError

ERASED = -1
POWER_CHECK_TOL = 0.01


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "awgn"
    snr_db: float | None = None
    p: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == "awgn":
            if self.snr_db is None or self.p is not None:
                raise ConfigurationError("awgn channel takes snr_db and no p")
            if math.isnan(self.snr_db):
                raise ConfigurationError("snr_db is NaN")
        elif self.kind in ("bsc", "bec"):
            if self.p is None or self.snr_db is not None:
                raise ConfigurationError(f"{self.kind} channel takes p and no snr_db")
            _check_prob(self.p)
        else:
            raise ConfigurationError(f"unknown channel kind {self.kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_prob(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"probability must lie in [0, 1], got {p!r}")


def noise_variance(snr_db: float) -> float:
    """Complex noise variance for unit-energy symbols; 0 at +inf dB."""
    if snr_db == math.inf:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


def awgn(symbols, snr_db: float, rng=None, check_power: bool = True):
    """Add complex white Gaussian noise to ``(..., 2)`` I/Q symbols.

    Torch inputs take an optional ``torch.Generator`` and stay differentiable
    (the noise is an additive constant); numpy inputs need a
    ``numpy.random.Generator``. With ``check_power`` the mean symbol energy of
    the whole input must be within 1% of 1.
    """
    is_torch = isinstance(symbols, torch.Tensor)
    x = symbols if is_torch else np.asarray(symbols, dtype=np.float64)
    if x.shape[-1] != 2:
        raise ConfigurationError(f"symbols must have a trailing I/Q axis of size 2, got {tuple(x.shape)}")
    n = x.numel() if is_torch else x.size
    if check_power and n:
        power = float((x.detach() ** 2).sum(-1).mean()) if is_torch else float(np.mean(np.sum(x**2, axis=-1)))
        if abs(power - 1.0) > POWER_CHECK_TOL:
            raise PowerContractError(f"input mean symbol energy {power:.4f} is not within 1% of 1")
    var = noise_variance(snr_db)
    if var == 0.0:
        return x
    sigma = math.sqrt(var / 2.0)
    if is_torch:
        noise = torch.randn(x.shape, generator=rng, dtype=x.dtype, device=x.device)
        return x + sigma * noise
    if rng is None:
        raise ConfigurationError("numpy AWGN needs an explicit numpy Generator")
    return x + sigma * rng.standard_normal(x.shape)


def bsc(bits, p: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each bit independently with probability ``p``."""
    _check_prob(p)
    b = np.asarray(bits, dtype=np.uint8)
    flips = rng.random(b.shape) < p
    return b ^ flips.astype(np.uint8)


def bec(bits, p: float, rng: np.random.Generator) -> np.ndarray:
    """Erase each bit independently with probability ``p``; erasures are ``ERASED``."""
    _check_prob(p)
    b = np.asarray(bits, dtype=np.int8)
    return np.where(rng.random(b.shape) < p, np.int8(ERASED), b).astype(np.int8)


def erasures_to_soft(trits) -> np.ndarray:
    """Map channel trits to P(bit = 1): erased positions become 0.5."""
    t = np.asarray(trits)
    return np.where(t == ERASED, 0.5, t).astype(np.float64)


def transmit_bits(bits, cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    """Send bits over a binary channel and return soft bit values in [0, 1]."""
    if cfg.kind == "bsc":
        return bsc(bits, cfg.p, rng).astype(np.float64)
    if cfg.kind == "bec":
        return erasures_to_soft(bec(bits, cfg.p, rng))
    raise ConfigurationError(f"{cfg.kind} is not a binary channel")
