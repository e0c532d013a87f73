"""
core/datasets.py — Seeded 2-D toy target distributions.

All kinds are scaled to lie roughly inside [−1, 1]²; `gaussian` is the
isotropic N(0, c²I) companion of the analytic-Gaussian ε oracle and works in
any dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from core.errors import ConfigurationError
from core.numerics import Rng
from models.run_config import DataKind

MIXTURE_RADIUS = 0.8
MIXTURE_STD = 0.05
SWISS_ROLL_SCALE = 1.0 / 15.0


@dataclass(frozen=True)
class ToyDataset:
    kind: DataKind
    dim: int = 2
    scale: float = 0.5          # only used by `gaussian`

    def __post_init__(self) -> None:
        if self.kind != DataKind.gaussian and self.dim != 2:
            raise ConfigurationError(f"Dataset '{self.kind.value}' is 2-D only, got dim={self.dim}.")

    def sample(self, n: int, rng: Rng) -> torch.Tensor:
        if n < 1:
            raise ConfigurationError("Sample count must be positive.")
        if self.kind == DataKind.gaussian:
            return rng.normal((n, self.dim)) * self.scale
        if self.kind == DataKind.gaussian_mixture_8:
            return _gaussian_mixture_8(n, rng)
        if self.kind == DataKind.swiss_roll:
            return _swiss_roll(n, rng)
        return _checkerboard(n, rng)


def _gaussian_mixture_8(n: int, rng: Rng) -> torch.Tensor:
    component = rng.integers(0, 8, (n,))
    angle = component.to(torch.float32) * (2 * math.pi / 8)
    centers = MIXTURE_RADIUS * torch.stack([torch.cos(angle), torch.sin(angle)], dim=-1)
    return centers + MIXTURE_STD * rng.normal((n, 2))


def _swiss_roll(n: int, rng: Rng) -> torch.Tensor:
    t = 1.5 * math.pi * (1 + 2 * rng.uniform((n,)))
    points = torch.stack([t * torch.cos(t), t * torch.sin(t)], dim=-1)
    points = points + 0.5 * rng.normal((n, 2))
    return points * SWISS_ROLL_SCALE


def _checkerboard(n: int, rng: Rng) -> torch.Tensor:
    # 4×4 board on [−1, 1]², points only on "black" squares
    x1 = 2 * rng.uniform((n,)) - 1
    u = rng.uniform((n,))
    row = rng.integers(0, 2, (n,)).to(torch.float32)
    x2 = 0.5 * u - 1 + row - 0.5 * (torch.floor((x1 + 1) * 2) % 2)
    x2 = x2 + 0.5
    return torch.stack([x1, x2], dim=-1)
