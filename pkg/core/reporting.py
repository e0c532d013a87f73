"""
core/reporting.py — Merge evaluated runs into comparison tables.

Input is any set of directories; every `eval_summary.json` found below them is
one evaluated model.  Models are identified by (config hash, seed,
algorithm), so listing the same run twice never double-counts it.  Values are
aggregated across seeds by the median.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from core.errors import ConfigurationError
from storage.files import Provenance, read_json, write_csv

logger = logging.getLogger(__name__)

ALGORITHM_ORDER = [
    "baseline", "+EMA", "+SWA",
    "+IP", "+IP+EMA", "+IP+SWA",
    "+SAM", "+SAM+EMA", "+SAM+SWA",
    "+IP+SAM", "+IP+SAM+EMA", "+IP+SAM+SWA",
]
COMPARISON_HEADER = ["algorithm", "respacing", "bits", "metric", "value", "delta_vs_fp32", "n_runs"]


@dataclass(frozen=True)
class ComparisonRow:
    algorithm: str
    respacing: str
    bits: int
    metric: str
    value: Optional[float]
    delta_vs_fp32: Optional[float]
    n_runs: int


@dataclass
class MergeResult:
    rows: list[ComparisonRow]
    runs: int
    config_hashes: list[str]
    seeds: list[int]
    missing: list[Path] = field(default_factory=list)


def _median(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.median(present)) if present else None


def _algorithm_key(name: str) -> tuple[int, str]:
    return (ALGORITHM_ORDER.index(name), "") if name in ALGORITHM_ORDER else (len(ALGORITHM_ORDER), name)


def _respacing_key(label: str) -> tuple[int, int]:
    if label == "-":
        return (0, 0)
    return (2, 0) if label == "full" else (1, int(label))


def collect_summaries(directories: Iterable[Path]) -> tuple[dict[tuple[str, int, str], dict], list[Path]]:
    """Unique evaluated models keyed by (config hash, seed, algorithm), plus directories with none."""
    found: dict[tuple[str, int, str], dict] = {}
    missing: list[Path] = []
    for directory in directories:
        directory = Path(directory)
        files = sorted(directory.rglob("eval_summary.json")) if directory.is_dir() else []
        if not files:
            missing.append(directory)
            logger.warning("No evaluation reports under %s", directory)
            continue
        for path in files:
            doc = read_json(path)
            key = (str(doc["config_hash"]), int(doc["seed"]), str(doc["algorithm"]))
            if key in found:
                logger.debug("Skipping duplicate report %s", path)
                continue
            found[key] = doc
    return found, missing


def merge_reports(directories: Iterable[Path]) -> MergeResult:
    summaries, missing = collect_summaries(directories)
    if not summaries:
        raise ConfigurationError(
            "No evaluation reports found in: " + ", ".join(str(p) for p in missing)
        )

    cells: dict[tuple[str, str, int, str], list[dict]] = defaultdict(list)
    for (_, _, algorithm), doc in summaries.items():
        for row in doc.get("rows", []):
            cells[(algorithm, str(row["respacing"]), int(row["bits"]), str(row["metric"]))].append(row)

    rows = [
        ComparisonRow(
            algorithm=algorithm, respacing=respacing, bits=bits, metric=metric,
            value=_median([r["value"] for r in entries]),
            delta_vs_fp32=_median([r.get("delta_vs_fp32") for r in entries]),
            n_runs=len(entries),
        )
        for (algorithm, respacing, bits, metric), entries in cells.items()
    ]
    rows.sort(key=lambda r: (_algorithm_key(r.algorithm), r.metric, _respacing_key(r.respacing), -r.bits))
    return MergeResult(
        rows=rows,
        runs=len({(h, s) for h, s, _ in summaries}),
        config_hashes=sorted({h for h, _, _ in summaries}),
        seeds=sorted({s for _, s, _ in summaries}),
        missing=missing,
    )


# ─── Rendering ────────────────────────────────────────────────────────────────

def arrow(before: Optional[float], after: Optional[float]) -> str:
    """`a → b (±Δ)` in the style of quantization tables."""
    if before is None or after is None:
        return "—"
    return f"{before:.4f} → {after:.4f} ({after - before:+.4f})"


def _fmt(value: Optional[float]) -> str:
    return "—" if value is None else f"{value:.4f}"


def render_summary(result: MergeResult) -> str:
    lookup = {(r.algorithm, r.respacing, r.bits, r.metric): r for r in result.rows}
    algorithms = sorted({r.algorithm for r in result.rows}, key=_algorithm_key)
    spacings = sorted({r.respacing for r in result.rows if r.respacing != "-"}, key=_respacing_key)
    low_bits = sorted({r.bits for r in result.rows if r.metric == "quantized_distance" and r.bits < 32},
                      reverse=True)

    def value(alg: str, resp: str, bits: int, metric: str) -> Optional[float]:
        row = lookup.get((alg, resp, bits, metric))
        return row.value if row else None

    lines = [
        "# Comparison",
        "",
        f"{result.runs} run(s), seeds {', '.join(map(str, result.seeds))}; values are medians over seeds.",
        "",
        "| algorithm | T′ | distance | " + " | ".join(f"{b}-bit" for b in low_bits)
        + (" | " if low_bits else "") + "ε-gap | attack Δ |",
        "|" + "---|" * (5 + len(low_bits)),
    ]
    for alg in algorithms:
        for resp in spacings:
            fp32 = value(alg, resp, 32, "quantized_distance")
            quant = [arrow(fp32, value(alg, resp, b, "quantized_distance")) for b in low_bits]
            cells = [alg, resp, _fmt(value(alg, resp, 32, "distance")), *quant,
                     _fmt(value(alg, resp, 32, "eps_gap")), _fmt(value(alg, resp, 32, "attack_degradation"))]
            lines.append("| " + " | ".join(cells) + " |")

    lines += ["", "| algorithm | LPF | loss |", "|---|---|---|"]
    for alg in algorithms:
        lines.append(f"| {alg} | {_fmt(value(alg, '-', 32, 'lpf'))} | {_fmt(value(alg, '-', 32, 'loss'))} |")

    if result.missing:
        lines += ["", "## Missing reports", ""] + [f"- {p}" for p in result.missing]
    return "\n".join(lines) + "\n"


def write_report(directories: Iterable[Path], out: Path) -> MergeResult:
    result = merge_reports(directories)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = Provenance(",".join(result.config_hashes), ",".join(map(str, result.seeds)))
    write_csv(out / "comparison.csv", COMPARISON_HEADER,
              ([r.algorithm, r.respacing, r.bits, r.metric, r.value, r.delta_vs_fp32, r.n_runs]
               for r in result.rows),
              provenance)
    (out / "summary.md").write_text(provenance.comment() + "\n\n" + render_summary(result), encoding="utf-8")
    logger.info("Report written to %s (%d rows)", out, len(result.rows))
    return result
