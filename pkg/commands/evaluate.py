"""
commands/evaluate.py — `eval` and its single-metric shortcuts.

  flatdiff eval runs/sam-seed0/final.ckpt --metrics loss,lpf,quantize
  flatdiff quantize-sweep runs/sam-seed0/final.ckpt --bits 32,8,4
  flatdiff exposure runs/sam-seed0/ema.ckpt --respacings 20
  flatdiff flatness | surface | attack CKPT

`--config` replaces only the checkpoint's `eval` section; `--seed` replaces
the evaluation seed.  Reports go to <run>/reports/<checkpoint stem>/ unless
`--out` is given.
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Any, Optional

from commands.common import add_common_flags
from core.errors import ConfigurationError, UsageError
from core.evaluation import EvalContext, METRICS, open_evaluation, parse_metrics, run_evaluation
from models.run_config import load_run_config, parse_run_config

logger = logging.getLogger(__name__)

SHORTCUTS: dict[str, tuple[list[str], str]] = {
    "quantize-sweep": (["quantize"], "distance after direct quantization, per bit width and respacing"),
    "exposure": (["exposure"], "‖ε_θ‖² gap between reference and sampling trajectories"),
    "flatness": (["lpf", "curve"], "LPF metric and perturbation curve"),
    "surface": (["surface"], "2-D loss surface along two random directions"),
    "attack": (["attack"], "distance degradation under the initial-latent attack"),
}


def _csv_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _respacings(text: str) -> list[Any]:
    return [item if item == "full" else int(item) for item in _csv_list(text)]


def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("checkpoint", type=Path)
    add_common_flags(parser)
    parser.add_argument("--respacings", default=None, help="comma list, e.g. 20,100,full")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("eval", help="evaluate a checkpoint")
    _add_eval_flags(parser)
    parser.add_argument("--metrics", default="loss,distance,lpf",
                        help=f"comma list of: {', '.join(METRICS)}")
    parser.add_argument("--bits", default=None, help="comma list of bit widths for `quantize`")
    parser.set_defaults(handler=handle_eval)

    for name, (metrics, help_text) in SHORTCUTS.items():
        parser = subparsers.add_parser(name, help=help_text)
        _add_eval_flags(parser)
        if name == "quantize-sweep":
            parser.add_argument("--bits", default=None, help="comma list of bit widths")
        if name == "attack":
            parser.add_argument("--strength", type=float, default=None)
            parser.add_argument("--amplify", type=float, default=None)
            parser.add_argument("--steps", type=int, default=None)
        parser.set_defaults(handler=handle_eval, metrics=",".join(metrics))


def _with_overrides(ctx: EvalContext, args: argparse.Namespace) -> EvalContext:
    raw = ctx.cfg.model_dump(mode="json")
    section: dict[str, Any] = raw["eval"]
    try:
        if args.seed is not None:
            section["seed"] = args.seed
        if args.respacings:
            section["respacings"] = _respacings(args.respacings)
        if getattr(args, "bits", None):
            section["bits"] = [int(b) for b in _csv_list(args.bits)]
    except ValueError as exc:
        raise UsageError(f"Bad flag value: {exc}") from exc
    for key in ("strength", "amplify", "steps"):
        value: Optional[float] = getattr(args, key, None)
        if value is not None:
            section["attack"][key] = value
    try:
        ctx.cfg = parse_run_config(raw)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    return ctx


def handle_eval(args: argparse.Namespace) -> int:
    metrics = parse_metrics(args.metrics)
    override = load_run_config(args.config) if args.config is not None else None
    ctx = _with_overrides(open_evaluation(args.checkpoint, args.out, eval_override=override), args)
    out = run_evaluation(ctx, metrics)
    for row in ctx.rows:
        value = "failed" if row["value"] is None else f"{row['value']:.6f}"
        print(f"{ctx.algorithm:<14} {row['metric']:<20} {row['respacing']:>5} {row['bits']:>3}b  {value}")
    print(f"reports: {out}")
    return 0
