"""Command-line entry point: csilab gen | train | eval | sweep | images | report."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import experiments
from .config import LOG_LEVEL
from .errors import ConfigError, CsiLabError
from .settings import load_settings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="settings document (key = value lines)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("--parallel", type=int, help="concurrent sweep cells")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("--log-level", default=LOG_LEVEL, help="logging level")

    parser = argparse.ArgumentParser(prog="csilab", description="CSI feedback experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("gen", parents=[common], help="generate train/val/test datasets")

    train = commands.add_parser("train", parents=[common], help="train one network")
    train.add_argument("--data", type=Path, help="dataset directory (default OUT/data)")
    train.add_argument("--resume", action="store_true", help="continue from OUT/model.csiw")

    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    evaluate.add_argument("--checkpoint", type=Path, help="checkpoint (default OUT/best.csiw)")
    evaluate.add_argument("--test", type=Path, help="test split (default OUT/data/test.csid)")
    evaluate.add_argument("--bypass", action="store_true", help="evaluate the identity instead of a network")

    commands.add_parser("sweep", parents=[common], help="train and evaluate the whole grid")

    images = commands.add_parser("images", parents=[common], help="write magnitude graymaps")
    images.add_argument("--checkpoint", type=Path)
    images.add_argument("--test", type=Path)
    images.add_argument("--count", type=int)
    images.add_argument("--bypass", action="store_true")

    commands.add_parser("report", parents=[common], help="aggregate sweep results and parameter counts")
    return parser


def run(args: argparse.Namespace) -> int:
    settings = load_settings(
        args.config,
        args.overrides,
        out=args.out,
        seed=args.seed,
        parallel=args.parallel,
    )

    if args.command == "gen":
        for split, path in experiments.run_gen(settings).items():
            print(f"{split}: {path}")
    elif args.command == "train":
        report = experiments.run_train(settings, args.data, resume=args.resume)
        print(f"{report.variant} gamma={report.gamma}: NMSE {report.nmse_db:.2f} dB, rho {report.rho:.4f}")
    elif args.command == "eval":
        report = experiments.run_eval(settings, args.checkpoint, args.test, bypass=args.bypass)
        print(f"{report.variant} gamma={report.gamma}: NMSE {report.nmse_db:.2f} dB, rho {report.rho:.4f}")
    elif args.command == "sweep":
        rows, failures = asyncio.run(experiments.run_sweep(settings))
        print(f"{len(rows) - failures} of {len(rows)} cells completed")
        if failures:
            return EXIT_PARTIAL
    elif args.command == "images":
        print(experiments.run_images(settings, args.checkpoint, args.test, args.count, bypass=args.bypass))
    elif args.command == "report":
        for name, path in experiments.write_report(settings).items():
            print(f"{name}: {path}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (CsiLabError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
