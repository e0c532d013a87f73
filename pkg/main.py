"""
main.py — Command-line entry point.

Subcommands (one module each under commands/):
  train           — fit one scheme; writes snapshots, final/ema/swa checkpoints
  eval            — run metrics on a checkpoint (quantize-sweep, exposure,
                    flatness, surface, attack are single-metric shortcuts)
  theory-verify   — certify the random-feature identities and KL bounds
  report          — merge evaluated runs into comparison tables

Exit codes: 0 ok, 1 other error, 2 usage, 3 numeric failure, 4 invariant violation.

Run:
  python main.py train --config configs/desk.toml --seed 0
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from typing import Optional

import torch

from commands import evaluate, report, theory, train
from config import settings
from core.errors import FlatDiffError, InvariantViolationError, NumericFailureError, UsageError

logging.basicConfig(
    level=settings.log_level.upper(),
    format="%(levelname)-8s %(name)s — %(message)s",
)
log = logging.getLogger("app")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_INVARIANT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flatdiff",
        description="Desk-scale laboratory for flat minima in diffusion models.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (train, evaluate, theory, report):
        module.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:            # argparse: --help → 0, bad usage → 2
        return int(exc.code or 0)

    torch.set_num_threads(settings.torch_threads)
    try:
        return args.handler(args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NumericFailureError as exc:
        log.critical("Numeric failure: %s", exc)
        return EXIT_NUMERIC
    except InvariantViolationError as exc:
        log.error("Invariant violated: %s", exc)
        return EXIT_INVARIANT
    except FlatDiffError as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
