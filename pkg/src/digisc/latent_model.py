"""Convolutional JSCC encoder/decoder mapping images to unit-power latents."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DegenerateInputError

# Encoder output grid is fixed at 8x8 for 32x32 inputs (two stride-2 stages).
_DOWNSAMPLE = 4


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor that fully determines every parameter array."""

    image_shape: tuple[int, int, int] = (32, 32, 3)
    channels: tuple[int, int, int] = (32, 64, 64)
    latent_dim: int = 512

    def __post_init__(self):
        h, w, c = self.image_shape
        if h % _DOWNSAMPLE or w % _DOWNSAMPLE:
            raise ConfigurationError(f"image side must be divisible by {_DOWNSAMPLE}: {self.image_shape}")
        if self.latent_dim % 2:
            raise ConfigurationError(f"latent_dim must be even, got {self.latent_dim}")
        if self.latent_dim % self.grid_cells:
            raise ConfigurationError(
                f"latent_dim {self.latent_dim} not divisible by the {self.grid_cells}-cell latent grid"
            )
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigurationError(f"channels must be three positive widths, got {self.channels}")

    @property
    def grid_cells(self) -> int:
        h, w, _ = self.image_shape
        return (h // _DOWNSAMPLE) * (w // _DOWNSAMPLE)

    @property
    def latent_channels(self) -> int:
        return self.latent_dim // self.grid_cells

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            image_shape=tuple(d["image_shape"]),
            channels=tuple(d["channels"]),
            latent_dim=int(d["latent_dim"]),
        )


def power_normalize(raw):
    """Scale each vector along the last axis to mean squared entry 1.

    Accepts a torch tensor (differentiable) or anything array-like, in which
    case a numpy array is returned.
    """
    as_numpy = not isinstance(raw, torch.Tensor)
    x = torch.as_tensor(np.asarray(raw, dtype=np.float64)) if as_numpy else raw
    energy = (x * x).sum(dim=-1, keepdim=True)
    if bool((energy == 0).any()):
        raise DegenerateInputError("cannot power-normalize an all-zero vector")
    out = x * torch.sqrt(x.shape[-1] / energy)
    return out.numpy() if as_numpy else out


class JSCCModel(nn.Module):
    """Small strided-conv encoder with a mirrored transposed-conv decoder."""

    def __init__(self, arch: Architecture = Architecture()):
        super().__init__()
        self.arch = arch
        c_in = arch.image_shape[2]
        c1, c2, c3 = arch.channels
        c_lat = arch.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(c_in, c1, 5, stride=2, padding=2),
            nn.PReLU(c1),
            nn.Conv2d(c1, c2, 5, stride=2, padding=2),
            nn.PReLU(c2),
            nn.Conv2d(c2, c3, 3, padding=1),
            nn.PReLU(c3),
            nn.Conv2d(c3, c_lat, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c_lat, c3, 3, padding=1),
            nn.PReLU(c3),
            nn.Conv2d(c3, c2, 3, padding=1),
            nn.PReLU(c2),
            nn.ConvTranspose2d(c2, c1, 5, stride=2, padding=2, output_padding=1),
            nn.PReLU(c1),
            nn.ConvTranspose2d(c1, c_in, 5, stride=2, padding=2, output_padding=1),
            nn.Sigmoid(),
        )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) images in [0, 1] -> (B, d) unit-power latents."""
        if tuple(images.shape[1:]) != tuple(self.arch.image_shape):
            raise ConfigurationError(
                f"image shape {tuple(images.shape[1:])} does not match architecture {self.arch.image_shape}"
            )
        z = self.encoder(images.permute(0, 3, 1, 2))
        return power_normalize(z.flatten(1))

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        """(B, d) latents -> (B, H, W, C) images in [0, 1]."""
        if latents.shape[-1] != self.arch.latent_dim:
            raise ConfigurationError(
                f"latent length {latents.shape[-1]} does not match latent_dim {self.arch.latent_dim}"
            )
        h, w, _ = self.arch.image_shape
        z = latents.reshape(-1, self.arch.latent_channels, h // _DOWNSAMPLE, w // _DOWNSAMPLE)
        return self.decoder(z).permute(0, 2, 3, 1)


def build_model(arch: Architecture = Architecture(), seed: int = 0, dtype=torch.float32) -> JSCCModel:
    """Initialise a model from ``seed`` without touching the global torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = JSCCModel(arch)
    return model.to(dtype)


def encode(image, model: JSCCModel) -> torch.Tensor:
    """Encode one (H, W, C) image or a (B, H, W, C) batch."""
    x = torch.as_tensor(image, dtype=next(model.parameters()).dtype)
    if x.dim() == 3:
        return model.encode(x.unsqueeze(0))[0]
    return model.encode(x)


def decode(latent, model: JSCCModel) -> torch.Tensor:
    """Decode one length-d latent or a (B, d) batch."""
    z = torch.as_tensor(latent, dtype=next(model.parameters()).dtype)
    if z.dim() == 1:
        return model.decode(z.unsqueeze(0))[0]
    return model.decode(z)
