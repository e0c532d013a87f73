"""tests/test_report.py — Merging eval summaries into comparison.csv and summary.md."""
import pytest

from core.errors import ConfigurationError
from core.reporting import COMPARISON_HEADER, arrow, merge_reports, write_report
from storage.files import Provenance, read_csv, write_json


def fake_summary(root, name, seed, algorithm, rows, config_hash="cafe"):
    """eval_summary.json as run_evaluation writes it."""
    full_rows = [{"respacing": "-", "bits": 32, "delta_vs_fp32": None, "source": "x", **r} for r in rows]
    write_json(root / name / "reports" / "final" / "eval_summary.json",
               {"algorithm": algorithm, "weights": "live", "step": 10, "checkpoint": "final.ckpt",
                "metrics": ["x"], "rows": full_rows},
               Provenance(config_hash, seed))
    return root / name


def test_arrow():
    assert arrow(1.0, 1.5) == "1.0000 → 1.5000 (+0.5000)"
    assert arrow(0.2, 0.1) == "0.2000 → 0.1000 (-0.1000)"
    assert arrow(None, 1.0) == "—"


def test_median_across_seeds(tmp_path):
    dirs = [fake_summary(tmp_path, f"baseline-seed{s}", s, "baseline", [{"metric": "lpf", "value": v}])
            for s, v in ((0, 1.0), (1, 10.0), (2, 2.0))]
    result = merge_reports(dirs)
    (row,) = result.rows
    assert (row.algorithm, row.metric, row.value, row.n_runs) == ("baseline", "lpf", 2.0, 3)
    assert result.seeds == [0, 1, 2] and result.runs == 3


def test_listing_a_run_twice_does_not_double_count(tmp_path):
    run = fake_summary(tmp_path, "sam-seed0", 0, "+SAM", [{"metric": "loss", "value": 0.3}])
    once, twice = merge_reports([run]), merge_reports([run, run, tmp_path])
    assert once.rows == twice.rows
    assert twice.rows[0].n_runs == 1


def test_rows_follow_algorithm_order(tmp_path):
    for i, alg in enumerate(["+SAM", "+EMA", "baseline", "+IP+SWA"]):
        fake_summary(tmp_path, f"r{i}", 0, alg, [{"metric": "loss", "value": float(i)}])
    assert [r.algorithm for r in merge_reports([tmp_path]).rows] == ["baseline", "+EMA", "+IP+SWA", "+SAM"]


def test_missing_directories_are_listed(tmp_path):
    run = fake_summary(tmp_path, "baseline-seed0", 0, "baseline", [{"metric": "loss", "value": 0.5}])
    empty = tmp_path / "empty"
    empty.mkdir()
    result = write_report([run, empty, tmp_path / "absent"], tmp_path / "report")
    assert result.missing == [empty, tmp_path / "absent"]
    summary = (tmp_path / "report" / "summary.md").read_text()
    assert "## Missing reports" in summary and str(empty) in summary


def test_no_reports_at_all(tmp_path):
    with pytest.raises(ConfigurationError):
        merge_reports([tmp_path])


def test_written_files(tmp_path):
    rows = [
        {"metric": "distance", "respacing": "20", "value": 0.10},
        {"metric": "quantized_distance", "respacing": "20", "value": 0.10, "delta_vs_fp32": 0.0},
        {"metric": "quantized_distance", "respacing": "20", "bits": 8, "value": 0.12, "delta_vs_fp32": 0.02},
        {"metric": "lpf", "value": 0.5},
    ]
    run = fake_summary(tmp_path, "baseline-seed7", 7, "baseline", rows, config_hash="beef")
    write_report([run], tmp_path / "report")

    provenance, table = read_csv(tmp_path / "report" / "comparison.csv")
    assert provenance == {"config_hash": "beef", "seed": "7"}
    assert list(table[0]) == COMPARISON_HEADER
    assert len(table) == 4
    eight_bit = next(r for r in table if r["bits"] == "8")
    assert float(eight_bit["delta_vs_fp32"]) == pytest.approx(0.02)

    summary = (tmp_path / "report" / "summary.md").read_text()
    assert "0.1000 → 0.1200 (+0.0200)" in summary
    assert "| baseline | 0.5000 | — |" in summary


def test_end_to_end_with_an_evaluated_run(trained_run, tmp_path):
    from core.evaluation import open_evaluation, run_evaluation
    from storage.files import RunPaths

    run_dir, _ = trained_run
    run_evaluation(open_evaluation(RunPaths(run_dir).final, out=tmp_path / "evals" / "final"), ["loss"])
    result = write_report([tmp_path / "evals"], tmp_path / "report")
    assert [(r.algorithm, r.metric) for r in result.rows] == [("baseline", "loss")]
