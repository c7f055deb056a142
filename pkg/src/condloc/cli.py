"""``condloc`` command line: generate, mine, train, index, localize, evaluate, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, parse_config
from .errors import CondLocError
from .pipeline import STAGES

log = logging.getLogger("condloc")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condloc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, fn in STAGES.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--force", action="store_true", help="accept artifacts from a different config hash")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    return parser


def load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if args.out is not None:
        cfg = cfg.with_overrides(output_dir=str(args.out))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_run_config(args)
        out = Path(cfg.output_dir)
        kwargs = {"resume": args.resume} if args.command == "train" else {}
        result = STAGES[args.command](cfg, out, force=args.force, **kwargs)
    except CondLocError as exc:
        print(f"condloc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    for path in result if isinstance(result, list) else [result]:
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
