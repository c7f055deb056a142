"""Run the three-seed night benchmark and print per-seed and median accuracies."""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict
from pathlib import Path

from condloc.benchmark import run_benchmark
from condloc.config import RunConfig, parse_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, help="base run configuration (defaults if omitted)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--workers", type=int, help="process pool size (default: CPU count)")
    ap.add_argument("--json", type=Path, help="also write the result here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = parse_config(args.config) if args.config else RunConfig().validate()
    res = run_benchmark(base, args.seeds, args.workers)
    for name, accs in sorted(res.accuracy.items()):
        print(f"{name:8s} " + " ".join(f"{a:6.2f}" for a in accs) + f"   median {res.median(name):6.2f}")
    print(f"random   " + " ".join(f"{a:6.2f}" for a in res.random_pose) + f"   median {res.random_median:6.2f}")
    for claim, ok in res.claims().items():
        print(f"{'PASS' if ok else 'FAIL'}  {claim}")
    print(f"wall time {res.seconds:.0f} s")
    if args.json:
        args.json.write_text(json.dumps({**asdict(res), "claims": res.claims()}, indent=2) + "\n")


if __name__ == "__main__":
    main()
