"""
core/flatness.py — Loss-landscape flatness measurements.

Every routine takes a loss closure over ParamVector plus the parameters to
probe, so the same code measures a trained diffusion model (through
`diffusion_objective` on a fixed evaluation draw) and closed-form toy losses.
Perturbations are applied to copies; the probed parameters are never written.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import torch

from core.diffusion import NoiseDraw, NoiseSchedule, noise_regression_loss
from core.errors import ConfigurationError, NumericFailureError
from core.networks import EpsModel
from core.numerics import LossFn, ParamVector, Rng
from models.reports import CurvePoint, LpfRecord, SurfaceGrid
from models.run_config import LpfEvalConfig

logger = logging.getLogger(__name__)


def diffusion_objective(
    model: EpsModel,
    draw: NoiseDraw,
    sched: NoiseSchedule,
    ip_strength: float = 0.0,
) -> LossFn:
    """Loss closure of `model`'s architecture on one fixed evaluation draw."""

    def loss(params: ParamVector) -> torch.Tensor:
        return noise_regression_loss(model.bind(params), draw, sched, ip_strength)

    return loss


def _evaluate(loss_fn: LossFn, params: ParamVector) -> float:
    with torch.no_grad():
        return float(loss_fn(params))


def _unit_direction(rng: Rng, template: ParamVector) -> torch.Tensor:
    u = rng.normal((template.numel,), dtype=torch.float64)
    return u / torch.linalg.vector_norm(u)


def _mean_and_spread(values: list[float]) -> tuple[float, float]:
    data = torch.tensor(values, dtype=torch.float64)
    if data.numel() < 2:
        return float(data.mean()), 0.0
    return float(data.mean()), float(data.std(correction=1))


# ─── LPF ──────────────────────────────────────────────────────────────────────

def lpf(loss_fn: LossFn, params: ParamVector, cfg: LpfEvalConfig, rng: Rng) -> LpfRecord:
    """
    Low-pass-filter loss: mean loss at params + z, z ~ N(0, σ²I), over M draws.

    σ is `cfg.sigma` when set, otherwise `cfg.sigma_rel` × RMS(params).
    Non-finite draws are excluded and counted.
    """
    if cfg.sigma is not None:
        sigma, rule = cfg.sigma, "absolute"
    else:
        sigma, rule = cfg.sigma_rel * params.rms(), f"{cfg.sigma_rel}*rms(params)"
    baseline = _evaluate(loss_fn, params)

    if sigma == 0:
        return LpfRecord(sigma=0.0, sigma_rule=rule, samples=cfg.samples, value=baseline,
                         stderr=0.0, exclusions=0, baseline_loss=baseline)

    losses: list[float] = []
    exclusions = 0
    for i in range(cfg.samples):
        z = rng.child("lpf", i).normal((params.numel,), dtype=params.dtype) * sigma
        value = _evaluate(loss_fn, params.like(params.values.detach() + z))
        if math.isfinite(value):
            losses.append(value)
        else:
            exclusions += 1
            logger.warning("LPF draw %d gave a non-finite loss; excluded", i)
    if not losses:
        raise NumericFailureError(f"All {cfg.samples} LPF draws were non-finite at σ={sigma}.")

    mean, spread = _mean_and_spread(losses)
    return LpfRecord(
        sigma=sigma,
        sigma_rule=rule,
        samples=cfg.samples,
        value=mean,
        stderr=spread / math.sqrt(len(losses)),
        exclusions=exclusions,
        baseline_loss=baseline,
    )


# ─── Perturbation curve ───────────────────────────────────────────────────────

def perturbation_curve(
    loss_fn: LossFn,
    params: ParamVector,
    radii: Sequence[float],
    k: int,
    rng: Rng,
) -> list[CurvePoint]:
    """
    Mean and std of loss(params + r·u) over k random unit directions u per radius.

    The same k directions are reused at every radius so the curve is a set of
    k rays through the parameter point.
    """
    if k < 1:
        raise ConfigurationError(f"Need at least one direction per radius, got k={k}.")
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ConfigurationError("Curve radii must be strictly increasing.")

    baseline = _evaluate(loss_fn, params)
    directions = [_unit_direction(rng.child("direction", j), params).to(params.dtype) for j in range(k)]
    points: list[CurvePoint] = []
    for r in radii:
        if r == 0:
            points.append(CurvePoint(radius=0.0, mean_loss=baseline, std_loss=0.0, k=k))
            continue
        losses, exclusions = [], 0
        for u in directions:
            value = _evaluate(loss_fn, params.like(params.values.detach() + r * u))
            if math.isfinite(value):
                losses.append(value)
            else:
                exclusions += 1
        if not losses:
            raise NumericFailureError(f"Every direction gave a non-finite loss at radius {r}.")
        if exclusions:
            logger.warning("Radius %g: %d of %d directions non-finite", r, exclusions, k)
        mean, spread = _mean_and_spread(losses)
        points.append(CurvePoint(radius=r, mean_loss=mean, std_loss=spread, k=k, exclusions=exclusions))
    return points


# ─── 2-D loss surface ─────────────────────────────────────────────────────────

def surface_directions(rng: Rng, template: ParamVector) -> tuple[list[int], torch.Tensor, torch.Tensor]:
    """Two orthonormal float64 directions and the sub-stream seeds they came from."""
    if template.numel < 2:
        raise ConfigurationError("A loss surface needs at least two parameters.")
    u_rng, v_rng = rng.child("surface", "u"), rng.child("surface", "v")
    u = _unit_direction(u_rng, template)
    v = v_rng.normal((template.numel,), dtype=torch.float64)
    v = v - torch.dot(v, u) * u
    v = v / torch.linalg.vector_norm(v)
    return [u_rng.seed, v_rng.seed], u, v


def loss_surface_grid(
    loss_fn: LossFn,
    params: ParamVector,
    extent: float,
    resolution: int,
    rng: Rng,
) -> SurfaceGrid:
    """Loss on a resolution² grid over two random unit directions.

    Non-finite points are stored as NaN and counted in `exclusions`.
    """
    if resolution < 2:
        raise ConfigurationError(f"Surface resolution must be ≥ 2, got {resolution}.")
    seeds, u, v = surface_directions(rng, params)
    u, v = u.to(params.dtype), v.to(params.dtype)
    coords = [extent * (2 * i / (resolution - 1) - 1) for i in range(resolution)]
    base = params.values.detach()

    losses: list[list[float]] = []
    exclusions = 0
    for a in coords:
        row = []
        for b in coords:
            value = _evaluate(loss_fn, params.like(base + a * u + b * v))
            if not math.isfinite(value):
                exclusions += 1
                logger.warning("Non-finite loss at surface point (%g, %g); excluded", a, b)
                value = math.nan
            row.append(value)
        losses.append(row)
    if exclusions == resolution * resolution:
        raise NumericFailureError(f"All {exclusions} surface points were non-finite.")
    return SurfaceGrid(extent=extent, resolution=resolution, direction_seeds=seeds,
                       coords=coords, losses=losses, exclusions=exclusions)
