"""Command-line entry point: ``contractify <command> --config run.json``."""

from __future__ import annotations

import argparse
import sys

from .pipeline import COMMANDS, EXIT_USAGE, ConfigError, RunConfig, run


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contractify",
                                description="Learn and verify neural contraction metrics.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--threads", type=int, help="worker threads for verification")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--budget-boxes", type=int, help="maximum number of branch-and-bound boxes")
    p.add_argument("--time-limit", type=float, help="verification time limit in seconds")
    p.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        cfg = RunConfig.load(args.config, threads=args.threads, seed=args.seed,
                             budget_boxes=args.budget_boxes, time_limit=args.time_limit)
        return run(args.command, cfg, quiet=args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
