"""Finite 2-D constellations: square QAM, learnable-spacing grids and K-means
irregular constellations, plus mapping/demapping between points, indices and
bit labels.

Points are stored as an ``(M, 2)`` float64 array of (I, Q) pairs. Every
constructor normalises to unit mean symbol energy over the points.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigurationError, FramingError, MissingFileError

KINDS = ("square-qam", "learnable-spacing", "irregular")
FORMAT_NAME = "digisc-constellation"
FORMAT_VERSION = 1
POWER_TOL = 1e-6
_CHUNK = 1 << 16


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def gray(n: int) -> int:
    return n ^ (n >> 1)


@dataclass(frozen=True)
class Constellation:
    points: np.ndarray
    labels: tuple[str, ...]
    kind: str = "square-qam"
    _label_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ConfigurationError(f"points must have shape (M, 2), got {pts.shape}")
        m = pts.shape[0]
        if not _is_pow2(m) or m < 2:
            raise ConfigurationError(f"constellation order must be a power of two >= 2, got {m}")
        if not np.all(np.isfinite(pts)):
            raise ConfigurationError("constellation points must be finite")
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown constellation kind {self.kind!r}")
        labels = tuple(self.labels)
        k = int(math.log2(m))
        if len(labels) != m or len(set(labels)) != m or any(
            len(s) != k or set(s) - {"0", "1"} for s in labels
        ):
            raise ConfigurationError(f"labels must be {m} distinct {k}-bit strings")
        power = float(np.mean(np.sum(pts**2, axis=1)))
        if abs(power - 1.0) > POWER_TOL:
            raise ConfigurationError(f"constellation mean power {power!r} is not 1")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_label_index", {s: i for i, s in enumerate(labels)})

    @property
    def order(self) -> int:
        return self.points.shape[0]

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.order))

    def label_bits(self) -> np.ndarray:
        """(M, log2 M) uint8 matrix of bit labels."""
        return np.array([[int(b) for b in s] for s in self.labels], dtype=np.uint8)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.points, dtype=dtype)

    def __eq__(self, other):
        if not isinstance(other, Constellation):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.labels == other.labels
            and np.array_equal(self.points, other.points)
        )

    def __hash__(self):
        return hash((self.kind, self.labels, self.points.tobytes()))


def normalize_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    power = np.mean(np.sum(pts**2, axis=1))
    if power == 0:
        raise ConfigurationError("cannot normalise a constellation with all points at the origin")
    return pts / np.sqrt(power)


# ---------------------------------------------------------------- I/Q pairing

def pair_iq(v):
    """Pair the first half of a latent with the second half as (I, Q).

    The pair is scaled by 1/sqrt(2) so that a unit mean-square latent yields
    unit mean-energy complex symbols. Works on torch tensors (differentiable)
    and numpy arrays; output shape is ``(..., d/2, 2)``.
    """
    d = v.shape[-1]
    if d % 2:
        raise FramingError(f"latent length {d} is odd and cannot be paired into I/Q symbols")
    h = d // 2
    if isinstance(v, torch.Tensor):
        return torch.stack((v[..., :h], v[..., h:]), dim=-1) / math.sqrt(2.0)
    v = np.asarray(v)
    return np.stack((v[..., :h], v[..., h:]), axis=-1) / math.sqrt(2.0)


def unpair_iq(s):
    """Inverse of :func:`pair_iq`."""
    if isinstance(s, torch.Tensor):
        return torch.cat((s[..., 0], s[..., 1]), dim=-1) * math.sqrt(2.0)
    s = np.asarray(s)
    return np.concatenate((s[..., 0], s[..., 1]), axis=-1) * math.sqrt(2.0)


# ---------------------------------------------------------------- grids

def _check_square_order(order: int) -> int:
    if not isinstance(order, (int, np.integer)) or not _is_pow2(int(order)) or order < 4:
        raise ConfigurationError(f"square constellation order must be a power of four >= 4, got {order!r}")
    side = math.isqrt(int(order))
    if side * side != order:
        raise ConfigurationError(f"order {order} is not a perfect square")
    return side


def grid_points_from_gaps(gaps: torch.Tensor) -> torch.Tensor:
    """Differentiable square grid from the gaps between adjacent axis levels.

    Both axes share the same level set; the levels are centred on zero and the
    grid is scaled to unit mean energy. Point ``i * L + q`` sits at
    ``(level[i], level[q])``.
    """
    zero = gaps.new_zeros(1)
    levels = torch.cumsum(torch.cat((zero, gaps)), dim=0)
    levels = levels - levels.mean()
    n = levels.shape[0]
    pts = torch.stack((levels.repeat_interleave(n), levels.repeat(n)), dim=-1)
    return pts / torch.sqrt(torch.mean(torch.sum(pts**2, dim=-1)))


def _gray_grid_labels(side: int) -> tuple[str, ...]:
    k = int(math.log2(side))
    axis = [format(gray(i), f"0{k}b") for i in range(side)]
    return tuple(axis[i] + axis[q] for i in range(side) for q in range(side))


def make_square_qam(order: int) -> Constellation:
    """Gray-labelled unit-energy square M-QAM."""
    side = _check_square_order(order)
    gaps = torch.full((side - 1,), 2.0, dtype=torch.float64)
    return Constellation(grid_points_from_gaps(gaps).numpy(), _gray_grid_labels(side), "square-qam")


def make_learnable_spacing(order: int, spacing: float = 1.0, gaps: Sequence[float] | None = None) -> Constellation:
    """Square grid with free per-axis level gaps.

    Global scale is removed by normalisation, so only the gap ratios matter.
    With ``gaps=None`` all ``sqrt(M) - 1`` gaps equal ``spacing``.
    """
    side = _check_square_order(order)
    if not spacing > 0:
        raise ConfigurationError(f"spacing must be positive, got {spacing!r}")
    if gaps is None:
        g = torch.full((side - 1,), float(spacing), dtype=torch.float64)
    else:
        g = torch.as_tensor(np.asarray(gaps, dtype=np.float64))
        if g.shape != (side - 1,) or not bool((g > 0).all()):
            raise ConfigurationError(f"need {side - 1} positive gaps for order {order}, got {list(gaps)}")
    return Constellation(grid_points_from_gaps(g).numpy(), _gray_grid_labels(side), "learnable-spacing")


# ---------------------------------------------------------------- nearest point

def squared_distances(queries, points):
    """Exact squared Euclidean distances, shape ``(..., M)``."""
    if isinstance(queries, torch.Tensor):
        if isinstance(points, torch.Tensor):
            pts = points.to(queries.dtype)
        else:
            pts = torch.tensor(np.asarray(points), dtype=queries.dtype)
        return ((queries.unsqueeze(-2) - pts) ** 2).sum(-1)
    q = np.asarray(queries, dtype=np.float64)
    return np.sum((q[..., None, :] - np.asarray(points, dtype=np.float64)) ** 2, axis=-1)


def nearest_indices(queries, points):
    """Vectorised nearest-point search; ties go to the lowest index.

    Torch inputs return a torch index tensor, anything else a numpy array.
    """
    if isinstance(queries, torch.Tensor):
        flat = queries.reshape(-1, queries.shape[-1])
        if flat.shape[0] == 0:
            return torch.zeros(queries.shape[:-1], dtype=torch.long)
        out = torch.cat([squared_distances(chunk, points).argmin(-1) for chunk in flat.split(_CHUNK)])
        return out.reshape(queries.shape[:-1])
    q = np.asarray(queries, dtype=np.float64)
    flat = q.reshape(-1, q.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    for s in range(0, flat.shape[0], _CHUNK):
        out[s : s + _CHUNK] = np.argmin(squared_distances(flat[s : s + _CHUNK], points), axis=-1)
    return out.reshape(q.shape[:-1])


def nearest_point(c: Constellation, p) -> int:
    return int(nearest_indices(np.asarray(p, dtype=np.float64)[None, :], c.points)[0])


def demodulate(c: Constellation, received, rule: str = "ml", priors=None, noise_var: float | None = None) -> np.ndarray:
    """Hard symbol decisions.

    ``ml`` picks the nearest point. ``map`` maximises
    ``log prior_j - |y - c_j|^2 / noise_var`` (complex Gaussian noise of total
    variance ``noise_var`` per symbol).
    """
    y = np.asarray(received, dtype=np.float64).reshape(-1, 2)
    if rule == "ml":
        return nearest_indices(y, c.points)
    if rule != "map":
        raise ConfigurationError(f"unknown demodulation rule {rule!r}")
    if priors is None or noise_var is None:
        raise ConfigurationError("map demodulation needs priors and noise_var")
    pri = np.asarray(priors, dtype=np.float64)
    if pri.shape != (c.order,) or np.any(pri < 0) or abs(pri.sum() - 1.0) > 1e-9:
        raise ConfigurationError("priors must be M non-negative values summing to 1")
    if not noise_var > 0:
        raise ConfigurationError(f"noise_var must be positive, got {noise_var!r}")
    with np.errstate(divide="ignore"):
        log_prior = np.log(pri)
    out = np.empty(y.shape[0], dtype=np.int64)
    for s in range(0, y.shape[0], _CHUNK):
        score = log_prior - squared_distances(y[s : s + _CHUNK], c.points) / noise_var
        out[s : s + _CHUNK] = np.argmax(score, axis=-1)
    return out


# ---------------------------------------------------------------- bits

def indices_to_bits(c: Constellation, indices) -> np.ndarray:
    """Flat uint8 bit array, ``log2 M`` bits per index."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    return c.label_bits()[idx].reshape(-1)


def bits_to_indices(c: Constellation, bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.uint8).reshape(-1)
    k = c.bits_per_symbol
    if b.size % k:
        raise FramingError(f"{b.size} bits cannot be split into {k}-bit symbols")
    words = b.reshape(-1, k) @ (1 << np.arange(k - 1, -1, -1))
    lookup = np.empty(c.order, dtype=np.int64)
    for i, s in enumerate(c.labels):
        lookup[int(s, 2)] = i
    return lookup[words]


def symbols_to_bits(c: Constellation, indices: Sequence[int]) -> str:
    return "".join(c.labels[int(i)] for i in indices)


def bits_to_symbols(c: Constellation, bits: str) -> list[int]:
    k = c.bits_per_symbol
    if len(bits) % k:
        raise FramingError(f"bit string of length {len(bits)} is not a multiple of {k}")
    try:
        return [c._label_index[bits[i : i + k]] for i in range(0, len(bits), k)]
    except KeyError as exc:
        raise FramingError(f"invalid bit word {exc.args[0]!r}") from None


def soft_bits_to_points(c: Constellation, soft_bits) -> np.ndarray:
    """Expected constellation point given independent P(bit = 1) per position.

    Erased bits carry 0.5, which averages over both label halves.
    """
    p = np.asarray(soft_bits, dtype=np.float64).reshape(-1, c.bits_per_symbol)
    lb = c.label_bits().astype(np.float64)
    # (N, M) probability of each label under independent bits
    probs = np.prod(np.where(lb[None] == 1, p[:, None, :], 1.0 - p[:, None, :]), axis=-1)
    return probs @ c.points


# ---------------------------------------------------------------- K-means

@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: list[float]
    iterations: int
    converged: bool


def _kmeanspp_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters; duplicate the first one
            centers.append(centers[0])
            continue
        i = int(rng.choice(n, p=d2 / total))
        centers.append(x[i])
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return np.array(centers)


def lloyd_kmeans(samples, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd iteration with D^2 (k-means++) seeding.

    ``objective[t]`` is the sum of squared distances after the assignment step
    of iteration ``t``. Stops when assignments stop changing or after
    ``max_iters`` updates. An emptied cluster is re-seeded at the point
    farthest from its current centroid.
    """
    x = np.asarray(samples, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_seed(x, k, rng)
    assign = nearest_indices(x, centroids)
    objective = [float(np.sum((x - centroids[assign]) ** 2))]
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        new = centroids.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        empty = np.flatnonzero(~nz)
        if empty.size:
            dist = np.sum((x - new[assign]) ** 2, axis=1)
            for j in empty:
                far = int(np.argmax(dist))
                new[j] = x[far]
                dist[far] = -1.0
        centroids = new
        new_assign = nearest_indices(x, centroids)
        objective.append(float(np.sum((x - centroids[new_assign]) ** 2)))
        if np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
    return KMeansResult(centroids, assign, objective, it, converged)


def irregular_labels_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting points by (angle in [0, 2pi), radius)."""
    angle = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2 * np.pi)
    radius = np.hypot(points[:, 0], points[:, 1])
    return np.lexsort((radius, angle))


def make_irregular(points) -> Constellation:
    """Normalise arbitrary centroids and label them in (angle, radius) order."""
    pts = normalize_points(points)
    pts = pts[irregular_labels_order(pts)]
    k = int(math.log2(pts.shape[0]))
    return Constellation(pts, tuple(format(i, f"0{k}b") for i in range(pts.shape[0])), "irregular")


def make_bank(latents) -> np.ndarray:
    """LatentSampleBank: (N, 2) I/Q samples from a batch of latents."""
    if isinstance(latents, torch.Tensor):
        latents = latents.detach().cpu().double().numpy()
    bank = pair_iq(np.asarray(latents, dtype=np.float64)).reshape(-1, 2)
    if bank.shape[0] == 0 or not np.all(np.isfinite(bank)):
        raise ConfigurationError("latent sample bank must be non-empty and finite")
    return bank


def kmeans_constellation(bank, order: int, seed: int = 0, max_iters: int = 100, min_bank_factor: int = 10) -> Constellation:
    x = np.asarray(bank, dtype=np.float64).reshape(-1, 2)
    if not _is_pow2(int(order)) or order < 2:
        raise ConfigurationError(f"order must be a power of two >= 2, got {order}")
    if x.shape[0] < min_bank_factor * order:
        raise ConfigurationError(
            f"bank of {x.shape[0]} samples is too small for {order} clusters (need {min_bank_factor * order})"
        )
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("bank contains non-finite samples")
    return make_irregular(lloyd_kmeans(x, order, seed, max_iters).centroids)


# ---------------------------------------------------------------- file format

def constellation_to_dict(c: Constellation) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "order": c.order,
        "kind": c.kind,
        "points": [[float(i), float(q)] for i, q in c.points],
        "labels": list(c.labels),
    }


def constellation_from_dict(d: dict) -> Constellation:
    if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"not a version-{FORMAT_VERSION} constellation record")
    c = Constellation(np.array(d["points"], dtype=np.float64), tuple(d["labels"]), d["kind"])
    if c.order != d["order"]:
        raise ConfigurationError("constellation order field disagrees with its points")
    return c


def save_constellation(c: Constellation, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(constellation_to_dict(c), indent=1, sort_keys=True) + "\n")
    return path


def load_constellation(path) -> Constellation:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"constellation file not found: {path}")
    return constellation_from_dict(json.loads(path.read_text()))
