"""Command-line entry point."""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import NeurovoxError
from .pipeline import STAGES, cmd_all


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurovox",
        description="Atlas-guided CT/MR tissue segmentation and its validation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["all"]:
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "all"
                           else "run every stage in order")
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--jobs", type=int, help="worker processes (overrides config)")
        p.add_argument("--seed", type=int,
                       help="seed; must match the config seed if both are set")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, cli_seed=args.seed, cli_out=args.out,
                          cli_jobs=args.jobs)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        runner = cmd_all if args.command == "all" else STAGES[args.command]
        failures = runner(cfg)
    except NeurovoxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if failures:
        for stage, sid, method, err in failures:
            print(f"failure [{stage}] {sid} {method}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
