"""End-to-end experiment pipeline: pretrain, design, fine-tune, sweep, report.

Every stage reads its inputs from files and writes new files under a run
directory, so stages can be re-run independently, fanned out to worker
processes, and compared byte for byte across reruns.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as C
from . import constellation as cst
from .checkpoint import Checkpoint, canonical_json, load_checkpoint, save_checkpoint
from .data import load_dataset
from .errors import ConfigurationError, StageMismatchError
from .evaluation import (
    ORDERED_SCHEMES,
    Check,
    ResultsStore,
    evaluate_scheme,
    multiround,
    ordering_report,
    plot_multiround,
    plot_psnr_curves,
)
from .modulators import ModulatorConfig
from .seeding import derive_seed
from .training import (
    TrainConfig,
    design_constellation,
    finetune_digital,
    pretrain_analog,
    train_digital_direct,
)

log = logging.getLogger(__name__)

DIGITAL_SCHEMES = ("ste-direct", "ste-finetune", "ste-irregular", "probabilistic")
MULTIROUND_SCHEMES = ("analog", "ste-finetune", "ste-irregular")


def scheme_modulator(cfg: dict, scheme: str, order: int) -> ModulatorConfig:
    """The modulator a named scheme uses at order ``order``."""
    if scheme == "ste-irregular":
        return C.modulator_config(cfg, family="symbol", bridge="ste", order=order, constellation="irregular", learnable=False)
    if scheme in ("ste-finetune", "ste-direct"):
        return C.modulator_config(cfg, family="symbol", bridge="ste", order=order, constellation="square-qam", learnable=False)
    if scheme == "probabilistic":
        return C.modulator_config(cfg, family="probabilistic", bridge="gumbel", order=order)
    raise ConfigurationError(f"scheme {scheme!r} has no modulator")


def train_config(cfg: dict, stage_key: str, seed: int, modulator: ModulatorConfig | None = None) -> TrainConfig:
    t = cfg["train"]
    s = t[stage_key]
    return TrainConfig(
        stage="analog" if stage_key == "analog" else "digital",
        epochs=s["epochs"],
        batch_size=s["batch_size"],
        lr=s["lr"],
        seed=seed,
        snr_grid=tuple(cfg["channel"]["snr_grid"]),
        modulator=modulator,
        tau_start=t["tau_start"],
        tau_end=t["tau_end"],
        lr_schedule=t["lr_schedule"],
        debug=t["debug"],
    )


def infer_scheme(ckpt: Checkpoint) -> str:
    if ckpt.stage == "analog":
        return "analog"
    mod = ckpt.modulator_config()
    if mod.family == "probabilistic":
        return "probabilistic"
    if ckpt.train_config.get("init") == "random":
        return "ste-direct"
    c = ckpt.get_constellation()
    if c is not None and c.kind == "irregular":
        return "ste-irregular"
    return "ste-finetune"


def write_metrics(history: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "tau", "lr"])
        for h in history:
            if "epoch" in h:
                w.writerow([h["epoch"], repr(h["loss"]), repr(h["tau"]), repr(h["lr"])])
    return path


def load_data(cfg: dict):
    return load_dataset(C.dataset_spec(cfg), seed=cfg["seed"])


# ---------------------------------------------------------------- stages

def pretrain(cfg: dict, out_dir, train=None) -> Path:
    out_dir = Path(out_dir)
    if train is None:
        train, _ = load_data(cfg)
    ckpt = pretrain_analog(train_config(cfg, "analog", cfg["seed"]), train, C.model_arch(cfg))
    path = save_checkpoint(ckpt, out_dir / "checkpoints" / "analog.ckpt")
    write_metrics(ckpt.history, out_dir / "metrics" / "analog.csv")
    return path


def design(cfg: dict, analog_path, order: int, out_dir, train=None) -> Path:
    out_dir = Path(out_dir)
    if train is None:
        train, _ = load_data(cfg)
    k = cfg["constellation"]
    c = design_constellation(
        load_checkpoint(analog_path),
        np.asarray(train)[: k["design_images"]],
        order,
        seed=derive_seed(cfg["seed"], "design", order),
        max_iters=k["max_iters"],
        min_bank_factor=k["min_bank_factor"],
    )
    return cst.save_constellation(c, out_dir / "constellations" / f"irregular-M{order}.json")


def train_scheme(cfg: dict, scheme: str, order: int, out_dir, analog_path=None, constellation_path=None, train=None) -> Path:
    """Train one digital scheme at one order; returns the checkpoint path."""
    out_dir = Path(out_dir)
    if train is None:
        train, _ = load_data(cfg)
    mod = scheme_modulator(cfg, scheme, order)
    seed = derive_seed(cfg["seed"], "train", scheme, order)
    c = cst.load_constellation(constellation_path) if constellation_path else None
    if scheme == "ste-irregular" and c is None:
        raise ConfigurationError("ste-irregular needs a designed constellation")
    if c is not None and c.order != order:
        raise ConfigurationError(f"constellation has {c.order} points, scheme asks for M={order}")
    if scheme == "ste-direct":
        ckpt = train_digital_direct(train_config(cfg, "direct", seed, mod), train, C.model_arch(cfg), c)
    else:
        if analog_path is None:
            raise StageMismatchError(f"{scheme} fine-tunes a pretrained analog checkpoint")
        base = load_checkpoint(analog_path)
        if base.stage != "analog":
            raise StageMismatchError(f"{scheme} must start from an analog-stage checkpoint")
        ckpt = finetune_digital(base, train_config(cfg, "digital", seed, mod), train, c)
    name = f"{scheme}-M{order}"
    path = save_checkpoint(ckpt, out_dir / "checkpoints" / f"{name}.ckpt")
    write_metrics(ckpt.history, out_dir / "metrics" / f"{name}.csv")
    return path


def _train_job(args):
    cfg, scheme, order, out_dir, analog_path, cpath = args
    return str(train_scheme(cfg, scheme, order, out_dir, analog_path, cpath))


def evaluate(cfg: dict, ckpt_paths, test, run_id: str = "", scheme: str | None = None) -> list:
    ev = cfg["eval"]
    records = []
    for p in ckpt_paths:
        ckpt = load_checkpoint(p)
        records += evaluate_scheme(
            ckpt,
            scheme or infer_scheme(ckpt),
            cfg["channel"]["snr_grid"],
            test,
            seed=cfg["seed"],
            n_images=ev["n_images"],
            batch_size=ev["batch_size"],
            run_id=run_id,
        )
    return records


def multiround_curves(cfg: dict, ckpt_paths, test) -> dict:
    mr = cfg["eval"]["multiround"]
    images = np.asarray(test)[: mr["n_images"]]
    curves = {}
    for p in ckpt_paths:
        ckpt = load_checkpoint(p)
        scheme = infer_scheme(ckpt)
        curves[scheme] = multiround(ckpt, mr["rounds"], mr["snr_db"], images, seed=cfg["seed"], scheme=scheme,
                                    batch_size=cfg["eval"]["batch_size"])
    return curves


def multiround_report(curves: dict) -> list[Check]:
    """Digital accumulates less distortion than analog; analog never recovers."""
    if "analog" not in curves:
        raise ConfigurationError("the multiround report needs an analog curve")
    a = curves["analog"]
    drop_a = a[0] - a[-1]
    checks = []
    best = None
    for s in ("ste-finetune", "ste-irregular"):
        if s in curves:
            d = curves[s][0] - curves[s][-1]
            checks.append(Check(f"multiround: {s} drop < analog drop", d < drop_a, drop_a - d))
            best = d if best is None else min(best, d)
    if best is None:
        raise ConfigurationError("the multiround report needs a ste-finetune or ste-irregular curve")
    checks.append(Check("multiround: a digital scheme accumulates less distortion than analog", best < drop_a, drop_a - best))
    inc = [i + 1 for i in range(len(a) - 1) if a[i + 1] > a[i]]
    checks.append(Check("multiround: analog PSNR non-increasing per round", not inc,
                        float(min(np.array(a[:-1]) - np.array(a[1:]))) if len(a) > 1 else 0.0,
                        [f"round {i + 1} > round {i}" for i in inc]))
    return checks


def write_report(records, orders, out_dir, schemes=ORDERED_SCHEMES) -> list[Check]:
    out_dir = Path(out_dir)
    checks = ordering_report(records, orders=orders, schemes=schemes)
    lines = [c.line() for c in checks]
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    (out_dir / "report.json").write_text(
        canonical_json([{"name": c.name, "passed": c.passed, "margin": c.margin, "violations": c.violations} for c in checks]) + "\n"
    )
    plot_psnr_curves(records, out_dir / "psnr_curves.png")
    return checks


# ---------------------------------------------------------------- full run

def run_pipeline(cfg: dict, run_dir, workers: int = 1, echo=print) -> dict:
    """Pretrain, design, train every scheme at every order, sweep and report."""
    run_dir = Path(run_dir)
    ev = cfg["eval"]
    orders = list(ev["orders"])
    schemes = list(ev["schemes"])
    train, test = load_data(cfg)

    echo("pretraining analog model")
    analog_path = pretrain(cfg, run_dir, train)

    cpaths = {}
    if "ste-irregular" in schemes:
        for m in orders:
            echo(f"designing irregular constellation M={m}")
            cpaths[m] = design(cfg, analog_path, m, run_dir, train)

    jobs = [
        (cfg, s, m, str(run_dir), str(analog_path), str(cpaths[m]) if s == "ste-irregular" else None)
        for s in schemes if s != "analog"
        for m in orders
    ]
    if workers > 1 and len(jobs) > 1:
        echo(f"training {len(jobs)} digital models on {workers} workers")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            ckpts = list(pool.map(_train_job, jobs))
    else:
        ckpts = []
        for j in jobs:
            echo(f"training {j[1]} M={j[2]}")
            ckpts.append(str(train_scheme(*j[:3], j[3], j[4], j[5], train=train)))

    echo("sweeping SNR grid")
    results = run_dir / "results"
    store = ResultsStore(results)
    run_id = run_dir.name
    all_paths = ([str(analog_path)] if "analog" in schemes else []) + ckpts
    records = evaluate(cfg, all_paths, test, run_id=run_id)
    store.append(records, run_id)
    summary = {"checkpoints": [str(Path(p).relative_to(run_dir)) for p in all_paths], "n_records": len(records)}

    if all(s in schemes for s in ORDERED_SCHEMES):
        checks = write_report(records, orders, results)
        for c in checks:
            echo(c.line())
        summary["ordering"] = [c.passed for c in checks]

    m = ev["multiround"]["order"]
    mr_paths = [str(analog_path)] + [p for p in ckpts if Path(p).stem in (f"ste-finetune-M{m}", f"ste-irregular-M{m}")]
    if len(mr_paths) > 1:
        echo(f"multiround at M={m}")
        curves = multiround_curves(cfg, mr_paths, test)
        mdir = run_dir / "multiround"
        mdir.mkdir(parents=True, exist_ok=True)
        (mdir / "multiround.json").write_text(canonical_json({**ev["multiround"], "curves": curves}) + "\n")
        plot_multiround(curves, mdir / "multiround.png")
        mchecks = multiround_report(curves)
        (mdir / "report.txt").write_text("\n".join(c.line() for c in mchecks) + "\n")
        for c in mchecks:
            echo(c.line())
        summary["multiround"] = [c.passed for c in mchecks]
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
