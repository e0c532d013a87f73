"""commands/common.py — Flags shared by every subcommand."""
from __future__ import annotations

import argparse
from pathlib import Path
from typing import Optional

from config import settings
from models.run_config import RunConfig


def add_common_flags(parser: argparse.ArgumentParser, config: bool = True, seed: bool = True) -> None:
    if config:
        parser.add_argument("--config", type=Path, default=None, help="run configuration (TOML)")
    if seed:
        parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--out", type=Path, default=None, help="output directory")


def default_run_dir(cfg: RunConfig) -> Path:
    """runs/<scheme>-seed<seed>, e.g. runs/ip-sam-seed0."""
    slug = cfg.optim.scheme.strip("+").replace("+", "-").lower()
    return Path(settings.runs_root) / f"{slug}-seed{cfg.seed}"


def run_dir_of(ckpt: Path) -> Path:
    """Run directory holding a checkpoint (snapshots live one level deeper)."""
    parent = Path(ckpt).resolve().parent
    return parent.parent if parent.name == "snapshots" else parent


def seed_or_default(seed: Optional[int]) -> int:
    return settings.default_seed if seed is None else seed
