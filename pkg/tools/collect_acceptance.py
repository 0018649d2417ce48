"""Copy the small artifacts of a sweep run into acceptance_run/ for the
acceptance suite, with a sha256 manifest of every file in the run
(checkpoints included).

    python3 tools/collect_acceptance.py RUN_DIR NAME [--keep-checkpoints M]
"""
import argparse
import hashlib
import json
import shutil
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
KEEP = ("config.json", "summary.json", "results", "multiround", "metrics", "constellations")
MR_SCHEMES = ("analog", "ste-finetune", "ste-irregular")


def sha256(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("run", type=Path)
    ap.add_argument("name")
    ap.add_argument("--dest", type=Path, default=ROOT / "acceptance_run")
    ap.add_argument("--keep-checkpoints", type=int, metavar="M", help="also copy the checkpoints used for multiround at order M")
    a = ap.parse_args()
    out = a.dest / a.name
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    for k in KEEP:
        src = a.run / k
        if src.is_dir():
            shutil.copytree(src, out / k)
        elif src.exists():
            shutil.copy2(src, out / k)
    files = sorted(p for p in a.run.rglob("*") if p.is_file())
    manifest = {str(p.relative_to(a.run)): sha256(p) for p in files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if a.keep_checkpoints:
        ck = a.dest / "checkpoints"
        ck.mkdir(exist_ok=True)
        for s in MR_SCHEMES:
            name = "analog.ckpt" if s == "analog" else f"{s}-M{a.keep_checkpoints}.ckpt"
            shutil.copy2(a.run / "checkpoints" / name, ck / name)
    print(f"{len(manifest)} files hashed into {out / 'manifest.json'}")


if __name__ == "__main__":
    main()
