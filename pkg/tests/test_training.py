"""tests/test_training.py — The training engine: outputs, determinism, resume and the run lock."""
import json

import pytest
import torch

from core.errors import ConfigurationError, RunLockedError
from core.training import MetricsLog, train_run
from models.run_config import parse_run_config
from storage.checkpoint import load_checkpoint
from storage.files import Provenance, RunPaths, read_csv
from tests.conftest import tiny_raw


def summary_without_wall_time(run_dir):
    document = json.loads(RunPaths(run_dir).summary.read_text())
    document.pop("wall_time")
    return document


def test_run_directory_layout(trained_run):
    out, summary = trained_run
    paths = RunPaths(out)
    for path in (paths.config, paths.metrics, paths.final, paths.ema, paths.swa, paths.summary):
        assert path.exists(), path
    assert not paths.lock.exists()
    assert [p.name for p in paths.snapshot_files()] == [
        "step_00000000.ckpt", "step_00000010.ckpt", "step_00000020.ckpt", "step_00000030.ckpt",
    ]
    assert summary.steps == 30


def test_metrics_log(trained_run):
    out, _ = trained_run
    provenance, rows = read_csv(RunPaths(out).metrics)
    assert provenance["seed"] == "3"
    assert [int(r["step"]) for r in rows] == [5, 10, 15, 20, 25, 30]
    spots = [r["lpf_spot"] for r in rows]
    assert spots[0] == "" and all(spots[i] != "" for i in (1, 3, 5))


def test_weight_kinds_are_tagged(trained_run):
    out, summary = trained_run
    paths = RunPaths(out)
    assert load_checkpoint(paths.final).extras["weights"] == "live"
    assert load_checkpoint(paths.ema).extras["weights"] == "ema"
    swa = load_checkpoint(paths.swa)
    assert swa.extras == {"weights": "swa", "scheme": "baseline"}
    assert summary.swa_models == 4                  # scaled SWA absorbs steps 27 to 30
    assert load_checkpoint(paths.final).adam["step"] == 30


def test_zero_steps_writes_initial_weights(tmp_path):
    cfg = parse_run_config(tiny_raw(train={"steps": 0}))
    summary = train_run(cfg, tmp_path / "run")
    paths = RunPaths(tmp_path / "run")
    assert summary.steps == 0 and summary.swa_models == 0
    initial = load_checkpoint(paths.snapshot(0)).params.values
    assert torch.equal(load_checkpoint(paths.final).params.values, initial)
    assert torch.equal(load_checkpoint(paths.swa).params.values, initial)


def test_training_is_deterministic(tmp_path, trained_run):
    out, _ = trained_run
    again = tmp_path / "again"
    train_run(parse_run_config(tiny_raw()), again)
    for name in ("final.ckpt", "ema.ckpt", "swa.ckpt"):
        assert (again / name).read_bytes() == (out / name).read_bytes()
    assert summary_without_wall_time(again) == summary_without_wall_time(out)


def test_resume_reproduces_uninterrupted_run(tmp_path, trained_run):
    out, _ = trained_run
    resumed = tmp_path / "resumed"
    train_run(parse_run_config(tiny_raw()), resumed, resume=RunPaths(out).snapshot(10))
    for name in ("final.ckpt", "ema.ckpt", "swa.ckpt"):
        assert (resumed / name).read_bytes() == (out / name).read_bytes()


def test_resume_refuses_a_different_config(tmp_path, trained_run):
    out, _ = trained_run
    other = parse_run_config(tiny_raw(seed=4))
    with pytest.raises(ConfigurationError):
        train_run(other, tmp_path / "other", resume=RunPaths(out).snapshot(10))


def test_sam_run_counts_as_sam_scheme(tmp_path):
    cfg = parse_run_config(tiny_raw(optim={"lr": 1e-3, "sam": {"rho": 0.05}}, train={"steps": 10}))
    train_run(cfg, tmp_path / "sam")
    final = load_checkpoint(tmp_path / "sam" / "final.ckpt")
    assert final.extras["scheme"] == "+SAM"
    assert final.extras["sam_skips"] == 0


def test_locked_run_directory(tmp_path):
    run = tmp_path / "locked"
    run.mkdir()
    RunPaths(run).lock.write_text("12345")
    with pytest.raises(RunLockedError):
        train_run(parse_run_config(tiny_raw(train={"steps": 1})), run)
    assert RunPaths(run).lock.exists()


# ─── Metrics log ──────────────────────────────────────────────────────────────

def test_metrics_log_keeps_rows_up_to_resume_step(tmp_path):
    path = tmp_path / "metrics.csv"
    provenance = Provenance("abc", 0)
    log = MetricsLog(path, provenance)
    for step in (5, 10, 15):
        log.append(step, 0.5, None, 0.0)
    log.close()

    log = MetricsLog(path, provenance, keep_until=10)
    assert log.last_step == 10
    with pytest.raises(ConfigurationError):
        log.append(10, 0.1, None, 0.0)
    log.append(11, 0.1, 0.2, 0.0)
    log.close()
    _, rows = read_csv(path)
    assert [r["step"] for r in rows] == ["5", "10", "11"]
