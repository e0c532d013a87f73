"""commands/theory.py — `theory-verify`: run the certification suite; exit 4 on any failure."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from commands.common import add_common_flags, seed_or_default
from config import settings
from core.certification import run_certification
from core.errors import InvariantViolationError
from storage.files import Provenance, write_json

logger = logging.getLogger(__name__)


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("theory-verify", help="certify the random-feature identities and bounds")
    add_common_flags(parser, config=False)
    parser.add_argument("--quick", action="store_true", help="reduced instance counts")
    parser.set_defaults(handler=handle_theory_verify)


def handle_theory_verify(args: argparse.Namespace) -> int:
    seed = seed_or_default(args.seed)
    out = args.out if args.out is not None else Path(settings.runs_root) / "certification"
    report = run_certification(seed, quick=args.quick)
    mode = "quick" if args.quick else "full"
    path = write_json(Path(out) / "certification.json",
                      {"mode": mode, "passed": report.passed, **report.model_dump(mode="json")},
                      Provenance(f"theory-{mode}", seed))

    for check in report.checks:
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name:<24} "
              f"{check.discrepancy:.3e} (tol {check.tolerance:.1e})")
    if report.sigma_d_bound_exceedances:
        print(f"note: σ_d-coefficient KL bound exceeded {report.sigma_d_bound_exceedances} time(s)")
    if not report.passed:
        failed = [c for c in report.checks if not c.passed]
        raise InvariantViolationError(
            f"{len(failed)} certification check(s) failed: {', '.join(c.name for c in failed)} (see {path})",
            record=failed[0].model_dump(mode="json"),
        )
    print(f"certification: {path}")
    return 0
