"""Rerun configs at several thread counts and compare every output file byte for byte.

    python3 scripts/check_determinism.py [--only PATTERN] [--threads 1 4]
"""
import argparse
import os
import sys
import tempfile
from pathlib import Path

from qvlab.cli import run

ROOT = Path(__file__).resolve().parent.parent


def snapshot(d: Path) -> dict:
    return {f.relative_to(d): f.read_bytes() for f in sorted(d.rglob("*")) if f.is_file()}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--only", default="*", help="glob over config names")
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    args = ap.parse_args()
    bad = 0
    with tempfile.TemporaryDirectory() as tmp:
        for cfg in sorted((ROOT / "experiments").glob(f"{args.only}.json")):
            seen = []
            for t in args.threads:
                os.environ["QVLAB_THREADS"] = str(t)
                out = Path(tmp) / f"{cfg.stem}-{t}"
                status = run(cfg, out_dir=out)
                seen.append((status, snapshot(out)))
            same = all(s == seen[0] for s in seen[1:])
            bad += not same
            print(f"{cfg.stem:32s} {'identical' if same else 'DIFFERS'}")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
