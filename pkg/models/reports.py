"""models/reports.py — Serializable report records emitted by the evaluation commands.

Core routines return these records; storage/files.py adds the provenance
(config hash + seed) when writing them to disk.
"""
from typing import Any, Optional

from pydantic import BaseModel, Field


# ─── Flatness ─────────────────────────────────────────────────────────────────

class LpfRecord(BaseModel):
    sigma: float                    # σ_lpf actually used
    sigma_rule: str                 # how σ_lpf was chosen, e.g. "0.01*rms(params)"
    samples: int                    # M
    value: float
    stderr: float
    exclusions: int                 # non-finite draws dropped from the mean
    baseline_loss: float


class CurvePoint(BaseModel):
    radius: float
    mean_loss: float
    std_loss: float
    k: int
    exclusions: int = 0


class SurfaceGrid(BaseModel):
    extent: float
    resolution: int
    direction_seeds: list[int]
    coords: list[float]             # shared u / v axis values
    losses: list[list[float]]       # losses[i][j] at (coords[i], coords[j]); NaN where excluded
    exclusions: int = 0             # non-finite grid points


# ─── Robustness ───────────────────────────────────────────────────────────────

class EpsNormProfile(BaseModel):
    step_index: list[int]
    timestep: list[int]
    reference_sq_norm: list[float]      # ‖ε_θ‖² on ground-truth noised data
    sampling_sq_norm: list[float]       # ‖ε_θ‖² along reverse trajectories
    reference_stderr: list[float]
    sampling_stderr: list[float]
    gap: float                          # mean |sampling − reference| over retained steps
    gap_stderr: float
    end_signed_gap: float               # sampling − reference at the last reverse step


class DistanceReport(BaseModel):
    kind: str
    value: float = Field(ge=0)
    n_a: int
    n_b: int
    seed: int


class SweepRow(BaseModel):
    variant: str
    bits: int
    respacing: str
    metric: str
    value: Optional[float] = None
    delta_vs_fp32: Optional[float] = None
    status: str = "ok"                  # "ok" | "failed"
    error: Optional[str] = None


class AttackReport(BaseModel):
    strength: float
    amplify: float
    steps: int
    respacing: str
    loss_clean: float
    loss_attacked: float
    distance_clean: float
    distance_attacked: float
    degradation: float


# ─── Theory certification ─────────────────────────────────────────────────────

class CheckResult(BaseModel):
    name: str
    regime: str
    tolerance: float
    discrepancy: float
    passed: bool
    seed: int
    details: dict[str, Any] = Field(default_factory=dict)


class CertificationReport(BaseModel):
    checks: list[CheckResult]
    violations: list[dict[str, Any]] = Field(default_factory=list)
    sigma_d_bound_exceedances: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)
