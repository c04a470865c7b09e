"""Run every config in experiments/ and check each against its wall-clock budget.

    python3 scripts/run_all_experiments.py [--only PATTERN] [--out DIR]
"""
import argparse
import json
import sys
import time
from pathlib import Path

from qvlab.cli import run

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--only", default="*", help="glob over config names")
    ap.add_argument("--out", default=str(ROOT / "results"))
    args = ap.parse_args()
    failures = 0
    for cfg in sorted((ROOT / "experiments").glob(f"{args.only}.json")):
        budget = json.loads(cfg.read_text()).get("budget_seconds", 600)
        t0 = time.perf_counter()
        status = run(cfg, out_dir=Path(args.out) / cfg.stem)
        took = time.perf_counter() - t0
        over = took > budget
        failures += status != 0 or over
        print(f"{cfg.stem:32s} exit={status} {took:7.1f}s / {budget:g}s{'  OVER BUDGET' if over else ''}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
