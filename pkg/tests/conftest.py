"""tests/conftest.py — Shared fixtures: tiny run configs, toy losses and a trained run directory."""
import os

import pytest
import torch

# Settings are read once at import; keep test output quiet and deterministic.
os.environ.setdefault("FLATDIFF_PROGRESS_BAR", "false")
os.environ.setdefault("FLATDIFF_TORCH_THREADS", "1")

from core.numerics import ParamVector, Segment  # noqa: E402
from core.training import train_run  # noqa: E402
from models.run_config import RunConfig, parse_run_config  # noqa: E402

TINY = {
    "seed": 3,
    "data": {"kind": "gaussian-mixture-8"},
    "schedule": {"T": 20},
    "model": {"hidden": [16, 16], "embed_dim": 8},
    "optim": {"lr": 1e-3},
    "train": {
        "steps": 30,
        "batch_size": 32,
        "snapshot_every": 10,
        "log_every": 5,
        "lpf_spot_every": 10,
        "lpf_spot_samples": 2,
        "scale_averaging": True,
    },
    "eval": {
        "batch": 64,
        "samples": 64,
        "respacings": [5, "full"],
        "bits": [32, 8, 4],
        "posthoc_gammas": [0.0, 5.0],
        "lpf": {"samples": 4},
        "curve": {"radii": [0.0, 0.5], "k": 2},
        "surface": {"resolution": 3},
        "attack": {"steps": 2},
        "distance": {"projections": 16},
    },
}


def tiny_raw(**sections) -> dict:
    """TINY with some sections merged in, e.g. tiny_raw(optim={"sam": {"rho": 0.05}})."""
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TINY.items()}
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw


@pytest.fixture
def tiny_config() -> RunConfig:
    return parse_run_config(tiny_raw())


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One finished tiny run shared by evaluation and CLI tests (read-only)."""
    out = tmp_path_factory.mktemp("runs") / "baseline-seed3"
    summary = train_run(parse_run_config(tiny_raw()), out)
    return out, summary


def flat(values, name: str = "w", dtype=torch.float64) -> ParamVector:
    """Single-segment ParamVector around a list of numbers."""
    tensor = torch.as_tensor(values, dtype=dtype).reshape(-1)
    return ParamVector([Segment(name, (tensor.numel(),), 0)], tensor)


def half_square(params: ParamVector) -> torch.Tensor:
    """L(w) = ½‖w‖²."""
    return 0.5 * params.values.to(torch.float64).pow(2).sum()
