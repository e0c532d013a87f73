"""models/run_config.py — RunConfig and its typed sections, loaded from TOML.

Keys are dotted TOML paths, e.g.

    optim.kind = "adam"
    optim.sam.rho = 0.01
    optim.swa.cycle = 10

Unknown keys are hard errors: every section forbids extra fields.
"""
from __future__ import annotations

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, model_validator

from core.errors import ConfigurationError

REFERENCE_STEPS = 200_000          # step budget the full-scale averaging defaults refer to


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataKind(str, Enum):
    gaussian_mixture_8 = "gaussian-mixture-8"
    swiss_roll = "swiss-roll"
    checkerboard = "checkerboard"
    gaussian = "gaussian"


class Activation(str, Enum):
    silu = "silu"
    relu = "relu"


class OptimizerKind(str, Enum):
    sgd = "sgd"
    adam = "adam"


class DistanceKind(str, Enum):
    sliced_w2 = "sliced-w2"
    mmd_rbf = "mmd-rbf"


Respacing = Union[PositiveInt, Literal["full"]]


# ─── Data / schedule / model ──────────────────────────────────────────────────

class DataConfig(Section):
    kind: DataKind = DataKind.gaussian_mixture_8
    scale: float = Field(default=0.5, gt=0)     # std-dev c of the `gaussian` kind


class ScheduleConfig(Section):
    T: PositiveInt = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02

    @model_validator(mode="after")
    def _check_bounds(self) -> "ScheduleConfig":
        if not (0 < self.beta_1 <= self.beta_T < 1):
            raise ValueError("require 0 < beta_1 <= beta_T < 1")
        return self


class ModelConfig(Section):
    dim: PositiveInt = 2
    hidden: tuple[PositiveInt, ...] = (128, 128, 128)
    embed_dim: PositiveInt = 32
    activation: Activation = Activation.silu

    @model_validator(mode="after")
    def _even_embedding(self) -> "ModelConfig":
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even (sin/cos pairs)")
        return self


# ─── Optimizer ────────────────────────────────────────────────────────────────

class SamConfig(Section):
    rho: float = Field(default=0.0, ge=0)       # 0 disables the ascent step


class SwaConfig(Section):
    cycle: PositiveInt = 100
    start: int = Field(default=180_000, ge=0)


class EmaConfig(Section):
    momentum: float = Field(default=1e-4, gt=0, le=1)   # λ weights the NEW parameters


class IpConfig(Section):
    strength: float = Field(default=0.0, ge=0)  # 0 disables input perturbation


class AdamConfig(Section):
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


class OptimConfig(Section):
    kind: OptimizerKind = OptimizerKind.adam
    lr: float = Field(default=1e-4, gt=0)
    sam: SamConfig = SamConfig()
    swa: SwaConfig = SwaConfig()
    ema: EmaConfig = EmaConfig()
    ip: IpConfig = IpConfig()
    adam: AdamConfig = AdamConfig()

    @property
    def scheme(self) -> str:
        """Training-scheme label used in report rows: baseline, +IP, +SAM or +IP+SAM."""
        parts = []
        if self.ip.strength > 0:
            parts.append("+IP")
        if self.sam.rho > 0:
            parts.append("+SAM")
        return "".join(parts) or "baseline"

    def scaled_to(self, total_steps: int) -> "OptimConfig":
        """
        Rescale the averaging schedule from the 200K-step reference budget:
        SWA starts at 90% of the run, its cycle and the EMA momentum keep
        their proportion of the budget.
        """
        ratio = total_steps / REFERENCE_STEPS
        swa = SwaConfig(
            cycle=max(1, round(100 * ratio)),
            start=int(0.9 * total_steps),
        )
        ema = EmaConfig(momentum=min(1.0, 1e-4 / ratio) if ratio > 0 else 1.0)
        return self.model_copy(update={"swa": swa, "ema": ema})


# ─── Training / evaluation ────────────────────────────────────────────────────

class TrainConfig(Section):
    steps: int = Field(default=20_000, ge=0)
    batch_size: PositiveInt = 256
    snapshot_every: PositiveInt = 1000
    log_every: PositiveInt = 100
    lpf_spot_every: int = Field(default=1000, ge=0)     # 0 disables the spot metric
    lpf_spot_samples: PositiveInt = 4
    scale_averaging: bool = True                         # apply OptimConfig.scaled_to(steps)


class LpfEvalConfig(Section):
    sigma: Optional[float] = Field(default=None, ge=0)  # absolute σ_lpf; None → sigma_rel·RMS
    sigma_rel: float = Field(default=0.01, ge=0)
    samples: PositiveInt = 32


class CurveConfig(Section):
    radii: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0)
    k: PositiveInt = 8

    @model_validator(mode="after")
    def _sorted(self) -> "CurveConfig":
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])) or any(r < 0 for r in self.radii):
            raise ValueError("radii must be non-negative and strictly increasing")
        return self


class SurfaceConfig(Section):
    extent: float = Field(default=2.0, gt=0)
    resolution: int = Field(default=21, ge=2)


class AttackConfig(Section):
    strength: float = Field(default=0.1, ge=0)
    steps: PositiveInt = 10
    amplify: float = Field(default=1.0, ge=0)           # e.g. 7.0 for the amplified row


class DistanceConfig(Section):
    kind: DistanceKind = DistanceKind.sliced_w2
    projections: PositiveInt = 128


class EvalConfig(Section):
    seed: int = 1234                 # fixed evaluation set, shared across compared models
    batch: PositiveInt = 2048        # size of the fixed loss-evaluation set
    samples: PositiveInt = 2000      # generated / target points per distance evaluation
    respacings: tuple[Respacing, ...] = (20, 100, "full")
    bits: tuple[PositiveInt, ...] = (32, 8, 4)
    posthoc_gammas: tuple[float, ...] = (0.0, 5.0, 16.0)
    lpf: LpfEvalConfig = LpfEvalConfig()
    curve: CurveConfig = CurveConfig()
    surface: SurfaceConfig = SurfaceConfig()
    attack: AttackConfig = AttackConfig()
    distance: DistanceConfig = DistanceConfig()


class RunConfig(Section):
    seed: int = 0
    data: DataConfig = DataConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    model: ModelConfig = ModelConfig()
    optim: OptimConfig = OptimConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def effective_optim(self) -> OptimConfig:
        """Optimizer config after budget scaling, as the trainer uses it."""
        if self.train.scale_averaging:
            return self.optim.scaled_to(self.train.steps)
        return self.optim


# ─── Loading ──────────────────────────────────────────────────────────────────

def parse_run_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in exc.errors()
        )
        raise ConfigurationError(f"Invalid run configuration — {problems}") from exc


def load_run_config(path: Optional[Path] = None, seed: Optional[int] = None) -> RunConfig:
    """Read a TOML (or JSON, as written into run directories) config; defaults if path is None."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"Cannot parse {path}: {exc}") from exc
        raw.pop("config_hash", None)        # provenance stamp of run-directory copies
    if seed is not None:
        raw = {**raw, "seed": seed}
    return parse_run_config(raw)
