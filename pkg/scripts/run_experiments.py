#!/usr/bin/env python3
"""Run every harness command once and write one JSON report per command.

    python scripts/run_experiments.py --out-dir results [--config toy-sliding]
"""

import argparse
import sys
import time
from pathlib import Path

from kvdirect import cli

EXPERIMENTS = ("reconstruct", "generate-match", "patch", "sweep", "rank", "memory", "bench")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--config", default="toy")
    ap.add_argument("--only", nargs="*", choices=EXPERIMENTS)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = []
    for name in args.only or EXPERIMENTS:
        t0 = time.perf_counter()
        code = cli.main([name, "--config", args.config, "--out", str(out / f"{name}.json")])
        print(f"{name:15s} exit={code} {time.perf_counter() - t0:6.1f}s", file=sys.stderr)
        if code:
            failed.append(name)
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
