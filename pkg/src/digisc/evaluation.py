"""SNR / modulation-order sweeps, multiround relaying, ordering checks and the
results store."""
from __future__ import annotations

import csv
import json
import math
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import constellation as cst
from .checkpoint import Checkpoint, restore
from .errors import ConfigurationError, IncompleteGridError, StageMismatchError
from .modulators import ModulatorConfig, build_link
from .seeding import derive_seed, torch_generator

SCHEMES = ("analog", "ste-direct", "ste-finetune", "ste-irregular", "probabilistic")
ORDERED_SCHEMES = ("analog", "ste-irregular", "ste-finetune", "ste-direct")
PSNR_INF = math.inf


def psnr(a, b, max_val: float = 1.0) -> float:
    """10 log10(MAX^2 / MSE); identical inputs give +inf."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ConfigurationError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_val**2 / mse)


def batch_psnr(a: torch.Tensor, b: torch.Tensor) -> np.ndarray:
    """Per-image PSNR of two (B, H, W, C) batches, in float64."""
    mse = ((a.double() - b.double()) ** 2).flatten(1).mean(1).numpy()
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, -10.0 * np.log10(mse))


def _mean_psnr(values: np.ndarray) -> float:
    return float(np.mean(values)) if np.all(np.isfinite(values)) else PSNR_INF


@dataclass
class ExperimentRecord:
    scheme: str
    order: int | None
    snr_db: float
    seed: int
    n_images: int
    psnr_db: float
    psnr_std: float = 0.0
    ser: float | None = None
    ber: float | None = None
    run_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if self.n_images <= 0:
            raise ConfigurationError("n_images must be positive")
        if math.isnan(self.psnr_db):
            raise ConfigurationError("psnr_db is NaN")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(**d)


def _link_for(ckpt: Checkpoint, scheme: str, modulator: ModulatorConfig | None, c: cst.Constellation | None):
    model, link = restore(ckpt)
    if scheme == "analog":
        if ckpt.stage != "analog":
            raise StageMismatchError("the analog scheme needs an analog-stage checkpoint")
        return model, link
    if ckpt.stage == "digital":
        if modulator is not None or c is not None:
            raise StageMismatchError("digital checkpoints carry their own modulator and constellation")
        return model, link
    if modulator is None:
        raise StageMismatchError(f"scheme {scheme!r} on an analog checkpoint needs a modulator")
    if modulator.learnable:
        raise ConfigurationError("learnable modulators must be trained before evaluation")
    if modulator.family in ("symbol", "probabilistic") and c is None:
        c = cst.make_square_qam(modulator.order)
    link = build_link(modulator, ckpt.arch.latent_dim, c, seed=ckpt.seed).to(next(model.parameters()).dtype)
    return model, link.eval()


def _error_rates(link, tx, rx):
    if tx is None or rx is None:
        return None, None
    tx = tx.reshape(-1).numpy()
    rx = rx.reshape(-1).numpy()
    ser = float(np.mean(tx != rx))
    if hasattr(link, "labels"):
        lb = np.array([[int(b) for b in s] for s in link.labels], dtype=np.uint8)
        ber = float(np.mean(lb[tx] != lb[rx]))
    else:
        diff = np.bitwise_xor(tx, rx).astype(np.uint64)
        ber = float(np.unpackbits(diff.view(np.uint8)).sum()) / (diff.size * _bits_per_index(link))
    return ser, ber


def _bits_per_index(link) -> int:
    if hasattr(link, "levels"):
        return int(math.log2(link.levels.shape[0]))
    if hasattr(link, "k_bits"):
        return link.k_bits
    return 1


def transmit(model, link, images: torch.Tensor, snr_db: float, gen, batch_size: int = 250):
    """Encode, send and decode ``images``; returns (reconstructions, tx, rx)."""
    outs, txs, rxs = [], [], []
    with torch.no_grad():
        for s in range(0, images.shape[0], batch_size):
            o = link(model.encode(images[s : s + batch_size]), snr_db, gen)
            outs.append(model.decode(o.latent))
            if o.tx_indices is not None:
                txs.append(o.tx_indices)
                rxs.append(o.rx_indices)
    tx = torch.cat(txs) if txs else None
    rx = torch.cat(rxs) if rxs else None
    return torch.cat(outs), tx, rx


def evaluate_scheme(
    ckpt: Checkpoint,
    scheme: str,
    snr_grid,
    images,
    seed: int,
    c: cst.Constellation | None = None,
    modulator: ModulatorConfig | None = None,
    n_images: int | None = None,
    batch_size: int = 250,
    run_id: str = "",
) -> list[ExperimentRecord]:
    """One record per SNR for a checkpoint/scheme pair.

    Each cell draws its channel noise from a generator derived from
    ``(seed, scheme, order, snr)``, so records are reproducible and cells are
    independent of evaluation order.
    """
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    model, link = _link_for(ckpt, scheme, modulator, c)
    mod = ckpt.modulator_config() or modulator
    order = None if scheme == "analog" else mod.order
    x = torch.as_tensor(np.asarray(images)[:n_images], dtype=next(model.parameters()).dtype)
    records = []
    for snr in snr_grid:
        gen = torch_generator(derive_seed(seed, "eval", scheme, order, float(snr)))
        xh, tx, rx = transmit(model, link, x, float(snr), gen, batch_size)
        vals = batch_psnr(x, xh)
        ser, ber = _error_rates(link, tx, rx)
        records.append(
            ExperimentRecord(
                scheme=scheme,
                order=order,
                snr_db=float(snr),
                seed=seed,
                n_images=int(x.shape[0]),
                psnr_db=_mean_psnr(vals),
                psnr_std=float(np.std(vals)) if np.all(np.isfinite(vals)) else 0.0,
                ser=ser,
                ber=ber,
                run_id=run_id,
            )
        )
    return records


def multiround(
    ckpt: Checkpoint,
    rounds: int,
    snr_db: float,
    images,
    seed: int,
    scheme: str | None = None,
    c: cst.Constellation | None = None,
    modulator: ModulatorConfig | None = None,
    batch_size: int = 250,
) -> list[float]:
    """PSNR against the originals after each of ``rounds`` relay hops.

    Every hop re-encodes the previous hop's reconstruction with the same model.
    """
    if rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    scheme = scheme or ("analog" if ckpt.stage == "analog" and modulator is None else "ste-finetune")
    model, link = _link_for(ckpt, scheme, modulator, c)
    mod = ckpt.modulator_config() or modulator
    order = None if scheme == "analog" else mod.order
    x0 = torch.as_tensor(np.asarray(images), dtype=next(model.parameters()).dtype)
    gen = torch_generator(derive_seed(seed, "eval", scheme, order, float(snr_db)))
    out, cur = [], x0
    for _ in range(rounds):
        cur, _, _ = transmit(model, link, cur, float(snr_db), gen, batch_size)
        out.append(_mean_psnr(batch_psnr(x0, cur)))
    return out


# ---------------------------------------------------------------- ordering report

@dataclass
class Check:
    name: str
    passed: bool
    margin: float
    violations: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        v = f" violations={self.violations}" if self.violations else ""
        return f"{status} {self.name} margin={self.margin:+.3f} dB{v}"


def _grid(records):
    table = {}
    for r in records:
        table[(r.scheme, r.order, r.snr_db)] = r.psnr_db
    return table


def ordering_report(
    records,
    orders=(4, 16, 64),
    snrs=None,
    schemes=ORDERED_SCHEMES,
    max_inversions: int = 1,
) -> list[Check]:
    """Check the scheme ranking and the modulation-order ranking.

    For every order M the SNR-averaged PSNR must satisfy
    ``analog >= ste-irregular >= ste-finetune >= ste-direct`` with at most
    ``max_inversions`` per-SNR inversions per adjacent pair, and for every
    digital scheme the SNR-averaged PSNR must not decrease with M.
    """
    records = list(records)
    table = _grid(records)
    if snrs is None:
        snrs = sorted({r.snr_db for r in records})
    snrs = [float(s) for s in snrs]
    missing = []
    for s in schemes:
        for m in orders:
            for snr in snrs:
                key = (s, None if s == "analog" else m, snr)
                if key not in table:
                    missing.append(key)
    if missing:
        raise IncompleteGridError(f"missing {len(missing)} cells, e.g. {missing[:3]}")

    def curve(s, m):
        return np.array([table[(s, None if s == "analog" else m, snr)] for snr in snrs])

    checks = []
    for m in orders:
        for hi, lo in zip(schemes[:-1], schemes[1:]):
            a, b = curve(hi, m), curve(lo, m)
            gap = float(np.mean(a) - np.mean(b))
            inv = [snr for snr, x, y in zip(snrs, a, b) if x < y]
            checks.append(
                Check(f"M={m}: {hi} >= {lo}", gap >= 0 and len(inv) <= max_inversions, gap, inv)
            )
    for s in schemes:
        if s == "analog":
            continue
        means = [float(np.mean(curve(s, m))) for m in sorted(orders)]
        diffs = np.diff(means)
        bad = [f"M={m2} < M={m1}" for m1, m2, dlt in zip(sorted(orders), sorted(orders)[1:], diffs) if dlt < 0]
        checks.append(Check(f"{s}: PSNR non-decreasing in M", not bad, float(diffs.min()) if diffs.size else 0.0, bad))
    return checks


# ---------------------------------------------------------------- results store

class ResultsStore:
    """Append-only JSON-lines record store with a summary CSV beside it."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.records_path = self.run_dir / "records.jsonl"
        self.summary_path = self.run_dir / "summary.csv"

    @staticmethod
    def new_run_id() -> str:
        return uuid.uuid4().hex[:12]

    def append(self, records, run_id: str | None = None) -> str:
        run_id = run_id or self.new_run_id()
        with open(self.records_path, "a") as f:
            for r in records:
                r.run_id = r.run_id or run_id
                f.write(r.to_json() + "\n")
        self.write_summary()
        return run_id

    def load(self, run_id: str | None = None) -> list[ExperimentRecord]:
        if not self.records_path.exists():
            return []
        out = []
        for line in self.records_path.read_text().splitlines():
            if line.strip():
                r = ExperimentRecord.from_dict(json.loads(line))
                if run_id is None or r.run_id == run_id:
                    out.append(r)
        return out

    def latest(self) -> list[ExperimentRecord]:
        """Records of the most recent run id for every (scheme, order, snr) cell."""
        cells = {}
        for r in self.load():
            cells[(r.scheme, r.order, r.snr_db)] = r
        return list(cells.values())

    def write_summary(self) -> Path:
        rows = sorted(self.latest(), key=lambda r: (r.scheme, r.order or 0, r.snr_db))
        with open(self.summary_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scheme", "order", "snr_db", "mean_psnr_db", "std_psnr_db", "ser", "ber", "n_images"])
            for r in rows:
                w.writerow([r.scheme, r.order if r.order is not None else "", r.snr_db, f"{r.psnr_db:.6f}",
                            f"{r.psnr_std:.6f}", "" if r.ser is None else f"{r.ser:.6g}",
                            "" if r.ber is None else f"{r.ber:.6g}", r.n_images])
        return self.summary_path


def plot_psnr_curves(records, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = list(records)
    orders = sorted({r.order for r in records if r.order is not None})
    fig, axes = plt.subplots(1, max(1, len(orders)), figsize=(4.5 * max(1, len(orders)), 3.8), squeeze=False)
    for ax, m in zip(axes[0], orders or [None]):
        for s in SCHEMES:
            pts = sorted((r.snr_db, r.psnr_db) for r in records if r.scheme == s and (r.order == m or s == "analog"))
            if pts:
                ax.plot(*zip(*pts), marker="o", label=s)
        ax.set_title(f"M = {m}" if m else "analog")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("PSNR (dB)")
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_multiround(curves: dict, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.8))
    for name, vals in curves.items():
        ax.plot(range(1, len(vals) + 1), vals, marker="o", label=name)
    ax.set_xlabel("round")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
