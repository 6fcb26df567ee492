"""Command-line entry point.

Usage: gblab <stage> [--config FILE] [--seed N] [--out DIR] [--jobs N]
             [--set key=value ...]

Exit codes: 0 success, 1 config error, 2 numeric failure, 3 failed
fps-verify verdict.
"""

from __future__ import annotations

import argparse
import sys

from .autodiff import NumericError
from .graphcore import GraphFormatError
from .pipeline import STAGES, ConfigError, RunConfig, run_pipeline


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gblab",
                                     description="backdoor attack laboratory "
                                                 "for graph encoders")
    sub = parser.add_subparsers(dest="stage", metavar="stage", required=True)
    for name in STAGES:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None,
                         help="flat key=value config file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the global seed")
        cmd.add_argument("--out", default=None, help="run directory")
        cmd.add_argument("--jobs", type=int, default=1,
                         help="parallel jobs, used by grid")
        cmd.add_argument("--set", action="append", default=[], metavar="K=V",
                         dest="assignments", help="override one config key")
    return parser


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
    cfg = cfg.with_set_args(args.assignments)
    direct = {}
    if args.seed is not None:
        direct["seed"] = args.seed
    if args.out is not None:
        direct["out"] = args.out
    return cfg.with_overrides(direct)


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits with 2 on usage errors
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = build_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return run_pipeline(args.stage, cfg, jobs=args.jobs)
    except (ConfigError, GraphFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
