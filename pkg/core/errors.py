"""
core/errors.py — Exception hierarchy shared by every module.

main.py maps these onto process exit codes:
  UsageError              → 2
  NumericFailureError     → 3
  InvariantViolationError → 4
  any other FlatDiffError → 1
"""
from __future__ import annotations

from typing import Any, Optional


class FlatDiffError(RuntimeError):
    """Base class for all errors raised by this package."""


class ConfigurationError(FlatDiffError):
    """Raised when inputs or configuration values are out of their valid range."""


class LayoutMismatchError(ConfigurationError):
    """Raised when two ParamVectors do not share the same segment table."""


class CheckpointFormatError(ConfigurationError):
    """Raised when a checkpoint file is truncated or has the wrong magic/version."""


class RunLockedError(ConfigurationError):
    """Raised when another trainer holds the lock of a run directory."""


class UsageError(FlatDiffError):
    """Raised on CLI misuse, e.g. an unknown metric name."""


class NumericFailureError(FlatDiffError):
    """Raised when a loss, gradient or state becomes non-finite."""

    def __init__(self, message: str, segment: Optional[str] = None) -> None:
        super().__init__(message)
        self.segment = segment


class SamplingDivergenceError(NumericFailureError):
    """Raised when the reverse chain produces a non-finite state."""

    def __init__(self, step_index: int, timestep: int) -> None:
        super().__init__(
            f"Sampler diverged at reverse step {step_index} (timestep {timestep})."
        )
        self.step_index = step_index
        self.timestep = timestep


class AttackDivergenceError(NumericFailureError):
    """Raised when gradient ascent on the initial latent becomes non-finite."""

    def __init__(self, step_index: int) -> None:
        super().__init__(f"Latent attack diverged at ascent step {step_index}.")
        self.step_index = step_index


class RegimeError(FlatDiffError):
    """Raised when a theory identity is evaluated outside the regime it is proven in."""

    def __init__(self, message: str, eigenvalue: Optional[float] = None) -> None:
        super().__init__(message)
        self.eigenvalue = eigenvalue


class InvariantViolationError(FlatDiffError):
    """Raised when a certified identity or bound fails; `record` holds the evidence."""

    def __init__(self, message: str, record: Optional[dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.record = record or {}
