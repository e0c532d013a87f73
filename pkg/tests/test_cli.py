"""tests/test_cli.py — Subcommand wiring and exit codes of main.main()."""
import pytest

import main
from commands import theory as theory_command
from commands import train as train_command
from core.errors import NumericFailureError
from models.reports import CertificationReport, CheckResult
from storage.checkpoint import load_checkpoint
from storage.files import RunPaths

SMALL_TOML = """
seed = 5

[schedule]
T = 10

[model]
hidden = [8]
embed_dim = 4

[train]
steps = 4
batch_size = 16
snapshot_every = 2
log_every = 2
lpf_spot_every = 0

[eval]
batch = 16
samples = 16
respacings = ["full"]
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return path


def test_help_exits_zero(capsys):
    assert main.main(["--help"]) == main.EXIT_OK
    assert "theory-verify" in capsys.readouterr().out


def test_missing_subcommand_is_usage_error():
    assert main.main([]) == main.EXIT_USAGE


def test_unknown_metric_is_usage_error(trained_run, tmp_path):
    run_dir, _ = trained_run
    code = main.main(["eval", str(RunPaths(run_dir).final), "--metrics", "fid", "--out", str(tmp_path)])
    assert code == main.EXIT_USAGE


def test_bad_respacing_flag_is_usage_error(trained_run, tmp_path):
    run_dir, _ = trained_run
    code = main.main(["exposure", str(RunPaths(run_dir).final), "--respacings", "abc", "--out", str(tmp_path)])
    assert code == main.EXIT_USAGE


def test_eval_writes_summary(trained_run, tmp_path, capsys):
    run_dir, _ = trained_run
    code = main.main(["eval", str(RunPaths(run_dir).final), "--metrics", "loss", "--out", str(tmp_path / "ev")])
    assert code == main.EXIT_OK
    assert (tmp_path / "ev" / "eval_summary.json").exists()
    assert "baseline" in capsys.readouterr().out


def test_missing_checkpoint_is_generic_error(tmp_path):
    assert main.main(["flatness", str(tmp_path / "absent.ckpt")]) == main.EXIT_ERROR


def test_train_then_resume_in_place(small_config, tmp_path):
    run = tmp_path / "run"
    assert main.main(["train", "--config", str(small_config), "--out", str(run)]) == main.EXIT_OK
    first = (run / "final.ckpt").read_bytes()
    assert load_checkpoint(run / "final.ckpt").seed == 5

    assert main.main(["train", "--resume", str(RunPaths(run).snapshot(2))]) == main.EXIT_OK
    assert (run / "final.ckpt").read_bytes() == first


def test_seed_flag_overrides_config(small_config, tmp_path):
    run = tmp_path / "seeded"
    assert main.main(["train", "--config", str(small_config), "--seed", "8", "--out", str(run)]) == main.EXIT_OK
    assert load_checkpoint(run / "final.ckpt").seed == 8


def test_numeric_failure_exit_code(monkeypatch, small_config, tmp_path):
    def explode(*args, **kwargs):
        raise NumericFailureError("loss became NaN")

    monkeypatch.setattr(train_command, "train_run", explode)
    assert main.main(["train", "--config", str(small_config), "--out", str(tmp_path)]) == main.EXIT_NUMERIC


def test_failed_certification_exit_code(monkeypatch, tmp_path):
    failing = CertificationReport(checks=[
        CheckResult(name="loss_equality", regime="test", tolerance=1e-10, discrepancy=1.0, passed=False, seed=0),
    ])
    monkeypatch.setattr(theory_command, "run_certification", lambda seed, quick=False: failing)
    assert main.main(["theory-verify", "--quick", "--out", str(tmp_path)]) == main.EXIT_INVARIANT
    assert (tmp_path / "certification.json").exists()


def test_report_without_evaluations_is_an_error(tmp_path):
    assert main.main(["report", str(tmp_path), "--out", str(tmp_path / "report")]) == main.EXIT_ERROR
