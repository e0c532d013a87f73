"""
tools/grid.py — Desk-scale comparison grid.

Trains baseline, +IP and +SAM for every seed, evaluates the live, EMA and SWA
weights of each run (the nine algorithm rows), merges everything into one
report and checks the expected orderings on the seed medians:

  flatness      LPF(+SAM) < LPF(baseline); +SAM curve at or below baseline
  quantization  8-bit degradation of +SAM ≤ baseline
  exposure      ε-gap of +SAM ≤ baseline
  averaging     +EMA / +SWA improve the distance of their base scheme
  attack        attack degradation of +SAM < baseline

Single-seed inversions are logged as warnings.  Exit status is 1 when a
median ordering fails.

Run: python tools/grid.py --config configs/desk.toml --seeds 0,1,2
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Optional

# Allow importing from the repo root
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import settings  # noqa: E402
from core.evaluation import open_evaluation, run_evaluation  # noqa: E402
from core.reporting import ComparisonRow, merge_reports, write_report  # noqa: E402
from core.training import train_run  # noqa: E402
from models.run_config import RunConfig, load_run_config  # noqa: E402
from storage.files import RunPaths  # noqa: E402

logging.basicConfig(level=settings.log_level.upper(), format="%(levelname)-8s %(name)s — %(message)s")
log = logging.getLogger("grid")

GRID_METRICS = ["loss", "distance", "lpf", "curve", "exposure", "quantize", "attack"]
SECTION = "=" * 60


def banner(title: str) -> None:
    print(f"\n{SECTION}\n  {title}\n{SECTION}")


def scheme_configs(base: RunConfig, ip_strength: float, sam_rho: float) -> dict[str, RunConfig]:
    def with_optim(ip: float, rho: float) -> RunConfig:
        optim = base.optim.model_copy(update={
            "ip": base.optim.ip.model_copy(update={"strength": ip}),
            "sam": base.optim.sam.model_copy(update={"rho": rho}),
        })
        return base.model_copy(update={"optim": optim})

    return {
        "baseline": with_optim(0.0, 0.0),
        "ip": with_optim(ip_strength, 0.0),
        "sam": with_optim(0.0, sam_rho),
    }


# ─── Directional checks ───────────────────────────────────────────────────────

class Table:
    def __init__(self, rows: Sequence[ComparisonRow]) -> None:
        self._rows = {(r.algorithm, r.respacing, r.bits, r.metric): r for r in rows}
        spacings = sorted({r.respacing for r in rows if r.respacing not in ("-", "full")}, key=int)
        self.respacing = "20" if "20" in spacings else (spacings[0] if spacings else "full")

    def get(self, algorithm: str, metric: str, respacing: str = "-", bits: int = 32,
            delta: bool = False) -> Optional[float]:
        row = self._rows.get((algorithm, respacing, bits, metric))
        if row is None:
            return None
        return row.delta_vs_fp32 if delta else row.value

    def curve_metrics(self) -> list[str]:
        return sorted({m for (_, _, _, m) in self._rows if m.startswith("curve_r")})


def _le(a: Optional[float], b: Optional[float], strict: bool = False) -> Optional[bool]:
    if a is None or b is None:
        return None
    return a < b if strict else a <= b


def directional_checks(table: Table) -> dict[str, Optional[bool]]:
    t = table.respacing
    checks: dict[str, Optional[bool]] = {
        "flatness: LPF +SAM < baseline": _le(table.get("+SAM", "lpf"), table.get("baseline", "lpf"), strict=True),
        "quantization: 8-bit degradation +SAM ≤ baseline": _le(
            table.get("+SAM", "quantized_distance", t, 8, delta=True),
            table.get("baseline", "quantized_distance", t, 8, delta=True)),
        "exposure: ε-gap +SAM ≤ baseline": _le(table.get("+SAM", "eps_gap", t), table.get("baseline", "eps_gap", t)),
        "attack: degradation +SAM < baseline": _le(table.get("+SAM", "attack_degradation", t),
                                                   table.get("baseline", "attack_degradation", t), strict=True),
    }
    curve = [_le(table.get("+SAM", m), table.get("baseline", m)) for m in table.curve_metrics()]
    checks["flatness: +SAM curve at or below baseline"] = (
        None if not curve or None in curve else all(curve)
    )
    for scheme in ("baseline", "+IP", "+SAM"):
        plain = table.get(scheme, "distance", t)
        for suffix in ("+EMA", "+SWA"):
            averaged = "" if scheme == "baseline" else scheme
            checks[f"averaging: {averaged}{suffix} improves {scheme}"] = _le(
                table.get(f"{averaged}{suffix}", "distance", t), plain, strict=True)
    return checks


# ─── Grid ─────────────────────────────────────────────────────────────────────

def run_cell(cfg: RunConfig, out: Path, metrics: Sequence[str], skip_existing: bool) -> Path:
    paths = RunPaths(out)
    if skip_existing and paths.summary.exists():
        log.info("Reusing trained run %s", out)
    else:
        train_run(cfg, out)
    for ckpt in (paths.final, paths.ema, paths.swa):
        run_evaluation(open_evaluation(ckpt), metrics)
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Train and compare the nine-algorithm grid.")
    parser.add_argument("--config", type=Path, default=Path("configs/desk.toml"))
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", type=Path, default=Path(settings.runs_root) / "grid")
    parser.add_argument("--ip-strength", type=float, default=0.1)
    parser.add_argument("--sam-rho", type=float, default=0.01)
    parser.add_argument("--metrics", default=",".join(GRID_METRICS))
    parser.add_argument("--skip-existing", action="store_true", help="reuse runs that already finished")
    args = parser.parse_args(argv)

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    metrics = [m for m in args.metrics.split(",") if m]
    base = load_run_config(args.config)

    run_dirs: dict[int, list[Path]] = {}
    for seed in seeds:
        banner(f"Seed {seed}")
        for name, cfg in scheme_configs(base.model_copy(update={"seed": seed}), args.ip_strength,
                                        args.sam_rho).items():
            out = args.out / f"{name}-seed{seed}"
            run_dirs.setdefault(seed, []).append(run_cell(cfg, out, metrics, args.skip_existing))

    banner("Report")
    all_dirs = [d for dirs in run_dirs.values() for d in dirs]
    write_report(all_dirs, args.out / "report")

    for seed, dirs in run_dirs.items():
        for name, holds in directional_checks(Table(merge_reports(dirs).rows)).items():
            if holds is False:
                log.warning("Seed %d inverts %s", seed, name)

    failures = 0
    banner("Orderings (seed median)")
    for name, holds in directional_checks(Table(merge_reports(all_dirs).rows)).items():
        verdict = "n/a " if holds is None else ("ok  " if holds else "FAIL")
        failures += holds is False
        print(f"  {verdict} {name}")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
