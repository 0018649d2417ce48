"""Image datasets: CIFAR-10 (binary or pickle layout), an image-folder
fallback, and a bundled procedural texture set for offline smoke runs.

All loaders return float32 arrays of shape (N, 32, 32, 3) with values in
[0, 1]. Nothing is ever downloaded.
"""
from __future__ import annotations

import json
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, MissingFileError

DATA_ROOT_ENV = "DIGISC_DATA_ROOT"
_RECORD = 1 + 32 * 32 * 3
_TRAIN_BATCHES = [f"data_batch_{i}" for i in range(1, 6)]


@dataclass
class DatasetSpec:
    name: str = "cifar10"
    root: str | None = None
    train_size: int = 10000
    test_size: int = 1000

    def resolve_root(self) -> Path:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        if root is None:
            raise ConfigurationError(
                f"dataset {self.name!r} needs a root directory (config io.data_root or ${DATA_ROOT_ENV})"
            )
        return Path(root)


def _read_bin(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % _RECORD:
        raise ConfigurationError(f"{path} is not a CIFAR-10 binary batch")
    raw = raw.reshape(-1, _RECORD)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), raw[:, 0].astype(np.int64)


def _read_pickle(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        d = pickle.load(f, encoding="bytes")
    images = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), np.asarray(d[b"labels"], dtype=np.int64)


def _find_cifar_dir(root: Path) -> tuple[Path, str]:
    for sub, kind in (("cifar-10-batches-bin", "bin"), ("cifar-10-batches-py", "py")):
        if (root / sub).is_dir():
            return root / sub, kind
    if (root / "test_batch.bin").exists():
        return root, "bin"
    if (root / "test_batch").exists():
        return root, "py"
    raise MissingFileError(f"no CIFAR-10 batches under {root}")


def load_cifar10_uint8(root, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 CIFAR-10 images (N, 32, 32, 3) and labels in file order."""
    d, kind = _find_cifar_dir(Path(root))
    names = _TRAIN_BATCHES if split == "train" else ["test_batch"]
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    parts = []
    for name in names:
        p = d / (name + ".bin") if kind == "bin" else d / name
        if not p.exists():
            raise MissingFileError(f"missing CIFAR-10 batch {p}")
        parts.append(_read_bin(p) if kind == "bin" else _read_pickle(p))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def convert_png_strips(src, dst) -> Path:
    """Write the standard binary layout from CIFAR-10 stored as PNG strips.

    Some redistributions (e.g. the ``tfjs-cifar10`` npm package) keep each
    batch as a 1024 x 10000 RGB PNG, one image per row in HWC order, with the
    labels in ``train_lables.json`` / ``test_lables.json``.
    """
    from PIL import Image

    src, out = Path(src), Path(dst) / "cifar-10-batches-bin"
    out.mkdir(parents=True, exist_ok=True)
    train_labels = json.loads((src / "train_lables.json").read_text())
    test_labels = json.loads((src / "test_lables.json").read_text())
    jobs = [(n, train_labels[i * 10000 : (i + 1) * 10000]) for i, n in enumerate(_TRAIN_BATCHES)]
    jobs.append(("test_batch", test_labels))
    for name, labels in jobs:
        pix = np.asarray(Image.open(src / f"{name}.png").convert("RGB"), dtype=np.uint8)
        imgs = pix.reshape(-1, 32, 32, 3)
        if imgs.shape[0] != len(labels):
            raise ConfigurationError(f"{name}: {imgs.shape[0]} images but {len(labels)} labels")
        rec = np.empty((imgs.shape[0], _RECORD), dtype=np.uint8)
        rec[:, 0] = labels
        rec[:, 1:] = imgs.transpose(0, 3, 1, 2).reshape(imgs.shape[0], -1)
        rec.tofile(out / f"{name}.bin")
    return out


def synthetic_textures(n: int = 512, seed: int = 0, size: int = 32) -> np.ndarray:
    """Procedural colour textures: a few random plane waves plus soft blobs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        img = np.zeros((size, size, 3))
        for _ in range(3):
            f = rng.uniform(0.02, 0.25, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * (f[0] * xx + f[1] * yy) + phase)
            img += wave[..., None] * rng.uniform(-0.5, 0.5, size=3)
        for _ in range(2):
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(3, 10)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            img += blob[..., None] * rng.uniform(-0.6, 0.6, size=3)
        img = img + rng.uniform(0.3, 0.7, size=3)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def load_image_folder(root) -> np.ndarray:
    """All 32x32 PNG/JPEG images under ``root``, sorted by relative path."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"image folder not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise MissingFileError(f"no images under {root}")
    imgs = []
    for p in files:
        a = np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)
        if a.shape != (32, 32, 3):
            raise ConfigurationError(f"{p} is {a.shape}, expected 32x32 RGB")
        imgs.append(a)
    return np.stack(imgs).astype(np.float32) / 255.0


def load_dataset(spec: DatasetSpec, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``(train, test)`` float arrays for a dataset spec.

    The train subset is a seeded random draw; the test subset is the first
    ``test_size`` images so every run evaluates on the same images.
    """
    if spec.name == "synthetic":
        train = synthetic_textures(spec.train_size, seed=seed)
        test = synthetic_textures(spec.test_size, seed=seed + 1_000_003)
        return train, test
    if spec.name == "cifar10":
        root = spec.resolve_root()
        tr, _ = load_cifar10_uint8(root, "train")
        te, _ = load_cifar10_uint8(root, "test")
    elif spec.name == "folder":
        root = spec.resolve_root()
        tr, te = load_image_folder(root / "train"), load_image_folder(root / "test")
    else:
        raise ConfigurationError(f"unknown dataset {spec.name!r}")
    if spec.train_size > len(tr) or spec.test_size > len(te):
        raise ConfigurationError(
            f"requested {spec.train_size}/{spec.test_size} images but only {len(tr)}/{len(te)} available"
        )
    pick = np.sort(np.random.default_rng(seed).permutation(len(tr))[: spec.train_size])
    train = tr[pick].astype(np.float32)
    test = te[: spec.test_size].astype(np.float32)
    if tr.dtype == np.uint8:
        train /= 255.0
        test /= 255.0
    return train, test
