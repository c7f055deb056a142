"""Train every N_S in {0, 2, 3, 4} and compare single- and multi-scale retrieval."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from condloc.config import RunConfig, parse_config
from condloc.pipeline import run_ablate


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--ns", type=int, nargs="+", default=[0, 2, 3, 4], help="N_S values to train")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = parse_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    path = run_ablate(cfg, args.out, n_s_values=tuple(args.ns))
    print(path.read_text())


if __name__ == "__main__":
    main()
