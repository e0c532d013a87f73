"""models/__init__.py — Re-export the configuration and report records."""
from .reports import (
    AttackReport,
    CertificationReport,
    CheckResult,
    CurvePoint,
    DistanceReport,
    EpsNormProfile,
    LpfRecord,
    SurfaceGrid,
    SweepRow,
)
from .run_config import RunConfig, load_run_config, parse_run_config

__all__ = [
    "RunConfig",
    "load_run_config",
    "parse_run_config",
    "LpfRecord",
    "CurvePoint",
    "SurfaceGrid",
    "EpsNormProfile",
    "DistanceReport",
    "SweepRow",
    "AttackReport",
    "CheckResult",
    "CertificationReport",
]
