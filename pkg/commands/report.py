"""commands/report.py — `report`: merge evaluated runs into comparison.csv and summary.md."""
from __future__ import annotations

import argparse
from pathlib import Path

from commands.common import add_common_flags
from config import settings
from core.reporting import write_report


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("report", help="merge run reports into comparison tables")
    parser.add_argument("runs", type=Path, nargs="+", help="run directories (searched recursively)")
    add_common_flags(parser, config=False, seed=False)
    parser.set_defaults(handler=handle_report)


def handle_report(args: argparse.Namespace) -> int:
    out = args.out if args.out is not None else Path(settings.runs_root) / "report"
    result = write_report(args.runs, out)
    print(f"{len(result.rows)} rows from {result.runs} run(s) → {out}")
    for missing in result.missing:
        print(f"missing reports: {missing}")
    return 0
