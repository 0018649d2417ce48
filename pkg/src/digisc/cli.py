"""Command-line entry point.

Every command reads a YAML config, writes a canonical JSON snapshot of the
resolved config into a fresh run directory, and never touches its inputs.
Errors are printed to stderr as one JSON object and mapped to distinct exit
statuses.
"""
from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
import time
from pathlib import Path

from . import config as C
from . import constellation as cst
from . import pipeline as P
from .checkpoint import load_checkpoint
from .errors import ConfigurationError, DigiscError, MissingFileError, OrderingViolationError
from .evaluation import ORDERED_SCHEMES, SCHEMES, ExperimentRecord, ResultsStore

log = logging.getLogger("digisc")


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"no such file: {p}")
    return p


def _run_dir(args, cfg: dict, command: str) -> Path:
    if args.out:
        out = Path(args.out)
        if out.exists() and any(out.iterdir()):
            raise ConfigurationError(f"output directory {out} is not empty; runs only write to fresh directories")
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = Path(cfg["io"]["out_dir"]) / f"{command}-{stamp}-{secrets.token_hex(3)}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(C.snapshot(cfg))
    return out


def _setup(args, command: str):
    if args.device != "cpu":
        raise ConfigurationError(f"device {args.device!r} is not supported; this build runs on cpu")
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1")
    cfg = C.load_config(_existing(args.config), args.seed)
    return cfg, _run_dir(args, cfg, command)


def _echo(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    cfg, out = _setup(args, "pretrain")
    path = P.pretrain(cfg, out)
    _echo(f"analog checkpoint: {path}")
    return 0


def cmd_design(args) -> int:
    cfg, out = _setup(args, "design")
    orders = args.order or [cfg["modulator"]["order"]]
    for m in orders:
        _echo(f"constellation: {P.design(cfg, _existing(args.checkpoint), m, out)}")
    return 0


def cmd_finetune(args) -> int:
    cfg, out = _setup(args, "finetune")
    order = args.order or cfg["modulator"]["order"]
    scheme = args.scheme
    if args.constellation and scheme != "ste-irregular":
        raise ConfigurationError("--constellation is only used by the ste-irregular scheme")
    cpath = _existing(args.constellation) if args.constellation else None
    apath = _existing(args.checkpoint) if args.checkpoint else None
    _echo(f"checkpoint: {P.train_scheme(cfg, scheme, order, out, apath, cpath)}")
    return 0


def _print_records(records) -> None:
    for r in records:
        order = "-" if r.order is None else r.order
        _echo(f"{r.scheme:14s} M={order!s:>3s} snr={r.snr_db:5.1f} dB psnr={r.psnr_db:7.3f} dB")


def cmd_evaluate(args) -> int:
    cfg, out = _setup(args, "evaluate")
    _, test = P.load_data(cfg)
    records = P.evaluate(cfg, [_existing(p) for p in args.checkpoints], test, run_id=out.name, scheme=args.scheme)
    ResultsStore(out / "results").append(records, out.name)
    _print_records(records)
    return 0


def cmd_sweep(args) -> int:
    cfg, out = _setup(args, "sweep")
    summary = P.run_pipeline(cfg, out, workers=args.workers, echo=_echo)
    _echo(f"run directory: {out}")
    ok = all(summary.get("ordering", [])) and all(summary.get("multiround", []))
    if not ok:
        raise OrderingViolationError(f"some orderings do not hold; see {out}/results/report.txt")
    return 0


def cmd_multiround(args) -> int:
    cfg, out = _setup(args, "multiround")
    _, test = P.load_data(cfg)
    curves = P.multiround_curves(cfg, [_existing(p) for p in args.checkpoints], test)
    from .checkpoint import canonical_json
    from .evaluation import plot_multiround

    (out / "multiround.json").write_text(canonical_json({**cfg["eval"]["multiround"], "curves": curves}) + "\n")
    plot_multiround(curves, out / "multiround.png")
    for s, v in curves.items():
        _echo(f"{s}: " + " ".join(f"{x:.3f}" for x in v))
    if "analog" in curves and len(curves) > 1:
        for c in P.multiround_report(curves):
            _echo(c.line())
    return 0


def cmd_report(args) -> int:
    src = _existing(args.results)
    store = ResultsStore(src if (src / "records.jsonl").exists() else src / "results")
    if not store.records_path.exists():
        raise MissingFileError(f"no records.jsonl under {src}")
    records = store.latest()
    out = Path(args.out) if args.out else store.run_dir / "report"
    if out.exists() and any(out.iterdir()):
        raise ConfigurationError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    orders = args.order or sorted({r.order for r in records if r.order is not None})
    checks = P.write_report(records, orders, out)
    for c in checks:
        _echo(c.line())
    if not all(c.passed for c in checks):
        raise OrderingViolationError(f"{sum(not c.passed for c in checks)} ordering checks failed")
    _echo("all orderings hold")
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(C.SCHEMA, indent=1, sort_keys=True))
    return 0


def cmd_prepare_cifar(args) -> int:
    from .data import convert_png_strips

    dest = Path(args.dest)
    if (dest / "cifar-10-batches-bin").exists():
        raise ConfigurationError(f"{dest / 'cifar-10-batches-bin'} already exists")
    _echo(f"wrote {convert_png_strips(_existing(args.src), dest)}")
    return 0


def cmd_show_constellation(args) -> int:
    c = cst.load_constellation(_existing(args.path))
    _echo(f"kind={c.kind} M={c.order}")
    for p, lab in zip(c.points, c.labels):
        _echo(f"{format(lab, f'0{c.bits_per_symbol}b')} {p[0]:+.6f} {p[1]:+.6f}")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(_existing(args.path))
    print(json.dumps(ck.metadata(), indent=1, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--out", default=None, help="fresh run directory (default: io.out_dir/<command>-<time>-<id>)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for independent training jobs")
    common.add_argument("--device", default="cpu")

    p = argparse.ArgumentParser(prog="digisc", description="Digital semantic-communication simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="train the analog encoder/decoder")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("design-constellation", parents=[common], help="K-means irregular constellation from an analog checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--order", type=int, action="append", help="modulation order (repeatable)")
    s.set_defaults(func=cmd_design)

    s = sub.add_parser("finetune", parents=[common], help="train one digital scheme")
    s.add_argument("--scheme", choices=[x for x in SCHEMES if x != "analog"], default="ste-finetune")
    s.add_argument("--checkpoint", help="analog checkpoint to start from (not used by ste-direct)")
    s.add_argument("--constellation", help="designed constellation file (ste-irregular)")
    s.add_argument("--order", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", parents=[common], help="PSNR over the SNR grid")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--scheme", choices=SCHEMES, help="override the scheme inferred from the checkpoint")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", parents=[common], help="full pipeline: pretrain, design, train, sweep, report")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("multiround", parents=[common], help="relay distortion accumulation")
    s.add_argument("checkpoints", nargs="+")
    s.set_defaults(func=cmd_multiround)

    s = sub.add_parser("report", help=f"ordering report ({' >= '.join(ORDERED_SCHEMES)}) for stored records")
    s.add_argument("results", help="run directory or results directory holding records.jsonl")
    s.add_argument("--out", default=None)
    s.add_argument("--order", type=int, action="append")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("schema", help="print the config JSON schema")
    s.set_defaults(func=cmd_schema)

    s = sub.add_parser("prepare-cifar", help="convert PNG-strip CIFAR-10 to the binary layout")
    s.add_argument("--src", required=True)
    s.add_argument("--dest", required=True)
    s.set_defaults(func=cmd_prepare_cifar)

    s = sub.add_parser("show-constellation", help="print a constellation file")
    s.add_argument("path")
    s.set_defaults(func=cmd_show_constellation)

    s = sub.add_parser("inspect", help="print checkpoint metadata")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except DigiscError as exc:
        print(json.dumps({"error": exc.code, "class": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
