"""
commands/train.py — `train`: fit one scheme into a run directory.

  flatdiff train --config configs/desk.toml --seed 1
  flatdiff train --resume runs/sam-seed1/snapshots/step_00010000.ckpt
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from commands.common import add_common_flags, default_run_dir, run_dir_of
from core.errors import UsageError
from core.training import train_run
from models.run_config import load_run_config, parse_run_config
from storage.checkpoint import load_checkpoint

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("train", help="train one scheme and write its checkpoints")
    add_common_flags(parser)
    parser.add_argument("--resume", type=Path, default=None, help="snapshot to continue from")
    parser.set_defaults(handler=handle_train)


def handle_train(args: argparse.Namespace) -> int:
    if args.resume is not None and args.config is None:
        # The snapshot carries the config it was trained with.
        stored = load_checkpoint(args.resume).config
        if stored is None:
            raise UsageError(f"{args.resume} carries no run config; pass --config.")
        cfg = parse_run_config(stored if args.seed is None else {**stored, "seed": args.seed})
    else:
        cfg = load_run_config(args.config, seed=args.seed)

    if args.out is not None:
        out = args.out
    elif args.resume is not None:
        out = run_dir_of(args.resume)
    else:
        out = default_run_dir(cfg)

    summary = train_run(cfg, out, resume=args.resume)
    print(f"{summary.run_dir}: {summary.steps} steps, eval loss {summary.final_loss:.6f} "
          f"(EMA {summary.ema_loss:.6f}, SWA {summary.swa_loss:.6f})")
    return 0
