"""
core/robustness.py — Robustness instruments: post-training weight quantization,
the exposure-bias ‖ε_θ‖² profile, the adversarial initial-latent attack, and
sample-based distances used in place of FID.

Distances are computed in float64.  Sliced-W2 is exact between the empirical
quantile functions of each projection, so it is symmetric and vanishes on
identical sets without any sorting ties mattering.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import torch

from core.diffusion import NoiseSchedule, RespacingMap, ddpm_sample, forward_noise
from core.errors import AttackDivergenceError, ConfigurationError, FlatDiffError
from core.networks import EpsModel, EpsPredictor
from core.numerics import ParamVector, Rng
from models.reports import DistanceReport, EpsNormProfile, SweepRow
from models.run_config import DistanceConfig, DistanceKind, Respacing

logger = logging.getLogger(__name__)

FP32_BITS = 32


# ─── Quantization ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class QuantSpec:
    """Symmetric per-segment quantization with half-away-from-zero rounding."""

    bits: int

    def __post_init__(self) -> None:
        if self.bits < 2:
            raise ConfigurationError(f"Quantization needs at least 2 bits, got {self.bits}.")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def is_identity(self) -> bool:
        """32 bits means the unquantized float32 model."""
        return self.bits >= FP32_BITS


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize_codes(values: torch.Tensor, spec: QuantSpec) -> tuple[torch.Tensor, float]:
    """Integer codes (as float64) and the max-abs of one segment."""
    w = values.detach().to(torch.float64)
    m = float(w.abs().max()) if w.numel() else 0.0
    if m == 0.0:
        return torch.zeros_like(w), 0.0
    return round_half_away(w * spec.qmax / m), m


def quantize(params: ParamVector, spec: QuantSpec) -> ParamVector:
    """
    Per segment: scale = max|w| / (2^(b−1) − 1), codes = round(w / scale),
    output = codes · scale.  All-zero segments stay zero.  Idempotent bitwise.
    """
    if spec.is_identity:
        return params.copy()
    out = torch.empty_like(params.values)
    for seg, chunk in params.iter_segments():
        codes, m = quantize_codes(chunk, spec)
        out[seg.offset:seg.stop] = (codes * m / spec.qmax).to(params.dtype)
    return params.like(out)


# ─── Distances ────────────────────────────────────────────────────────────────

def _check_sets(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ConfigurationError("Distance needs two non-empty sample sets.")
    a64 = a.detach().to(torch.float64).reshape(a.shape[0], -1)
    b64 = b.detach().to(torch.float64).reshape(b.shape[0], -1)
    if a64.shape[1] != b64.shape[1]:
        raise ConfigurationError(f"Sample dimensions differ: {a64.shape[1]} vs {b64.shape[1]}.")
    return a64, b64


def _quantile_w2_squared(pa: torch.Tensor, pb: torch.Tensor) -> torch.Tensor:
    """∫₀¹ (F_a⁻¹(u) − F_b⁻¹(u))² du per column for sorted projections (n, L)."""
    na, nb = pa.shape[0], pb.shape[0]
    breaks = torch.cat([
        torch.arange(1, na + 1, dtype=torch.float64) / na,
        torch.arange(1, nb + 1, dtype=torch.float64) / nb,
    ]).unique(sorted=True)
    widths = torch.diff(breaks, prepend=torch.zeros(1, dtype=torch.float64))
    mid = breaks - widths / 2
    ia = torch.clamp(torch.ceil(mid * na).long() - 1, 0, na - 1)
    ib = torch.clamp(torch.ceil(mid * nb).long() - 1, 0, nb - 1)
    return (widths.unsqueeze(1) * (pa[ia] - pb[ib]) ** 2).sum(dim=0)


def sliced_w2(a: torch.Tensor, b: torch.Tensor, projections: int, rng: Rng) -> float:
    if projections < 1:
        raise ConfigurationError(f"Need at least one projection, got {projections}.")
    a64, b64 = _check_sets(a, b)
    directions = rng.normal((a64.shape[1], projections), dtype=torch.float64)
    directions = directions / torch.linalg.vector_norm(directions, dim=0, keepdim=True)
    pa = torch.sort(a64 @ directions, dim=0).values
    pb = torch.sort(b64 @ directions, dim=0).values
    return math.sqrt(float(_quantile_w2_squared(pa, pb).mean()))


def mmd_rbf(a: torch.Tensor, b: torch.Tensor) -> float:
    """Biased RBF-kernel MMD with the pooled median squared distance as bandwidth."""
    a64, b64 = _check_sets(a, b)
    pooled = torch.cat([a64, b64])
    sq = torch.cdist(pooled, pooled, compute_mode="donot_use_mm_for_euclid_dist") ** 2
    n = pooled.shape[0]
    rows, cols = torch.triu_indices(n, n, offset=1)
    bandwidth = float(sq[rows, cols].median()) if rows.numel() else 1.0
    bandwidth = bandwidth if bandwidth > 0 else 1.0
    kernel = torch.exp(-sq / (2 * bandwidth))
    na = a64.shape[0]
    k_aa, k_bb, k_ab = kernel[:na, :na], kernel[na:, na:], kernel[:na, na:]
    mmd2 = float(k_aa.mean() + k_bb.mean() - 2 * k_ab.mean())
    return math.sqrt(max(mmd2, 0.0))


def distance(a: torch.Tensor, b: torch.Tensor, cfg: DistanceConfig, rng: Rng) -> DistanceReport:
    if cfg.kind == DistanceKind.sliced_w2:
        value = sliced_w2(a, b, cfg.projections, rng)
    else:
        value = mmd_rbf(a, b)
    return DistanceReport(kind=cfg.kind.value, value=value, n_a=int(a.shape[0]),
                          n_b=int(b.shape[0]), seed=rng.seed)


def sampler_stream(rng: Rng, respacing_label: str) -> Rng:
    """Reverse-chain noise for one respacing; plain and quantized evaluations share it."""
    return rng.child("samples", respacing_label)


def distance_stream(rng: Rng) -> Rng:
    return rng.child("distance")


# ─── Exposure bias ────────────────────────────────────────────────────────────

def _sq_norm_stats(eps_hat: torch.Tensor) -> tuple[float, float]:
    norms = eps_hat.detach().to(torch.float64).pow(2).flatten(1).sum(dim=1)
    n = norms.numel()
    stderr = float(norms.std(correction=1)) / math.sqrt(n) if n > 1 else 0.0
    return float(norms.mean()), stderr


def exposure_profile(
    predictor: EpsPredictor,
    data: torch.Tensor,
    sched: NoiseSchedule,
    respacing: RespacingMap,
    rng: Rng,
) -> EpsNormProfile:
    """
    ‖ε_θ‖² on ground-truth noised data vs. along the model's own reverse
    trajectories, per retained step in sampling order.  `data` supplies n
    real points; the sampler draws the same number of chains.
    """
    n = int(data.shape[0])
    if n < 1:
        raise ConfigurationError("Exposure profile needs at least one data point.")

    steps: list[int] = []
    timesteps: list[int] = []
    sampling: list[tuple[float, float]] = []

    def record(step_index: int, timestep: int, _x: torch.Tensor, eps_hat: torch.Tensor) -> None:
        steps.append(step_index)
        timesteps.append(timestep)
        sampling.append(_sq_norm_stats(eps_hat))

    ddpm_sample(predictor, n, sched, respacing, rng.child("exposure", "sampler"),
                dim=int(data.shape[1]), trace=record, dtype=data.dtype)

    reference: list[tuple[float, float]] = []
    with torch.no_grad():
        for timestep in timesteps:
            eps = rng.child("exposure", "reference", timestep).normal(data.shape, dtype=data.dtype)
            t = torch.full((n,), timestep, dtype=torch.long)
            reference.append(_sq_norm_stats(predictor(forward_noise(data, t, eps, sched), t)))

    ref_mean = [m for m, _ in reference]
    smp_mean = [m for m, _ in sampling]
    diffs = [abs(s - r) for s, r in zip(smp_mean, ref_mean)]
    combined_se = [math.hypot(rs, ss) for (_, rs), (_, ss) in zip(reference, sampling)]
    return EpsNormProfile(
        step_index=steps,
        timestep=timesteps,
        reference_sq_norm=ref_mean,
        sampling_sq_norm=smp_mean,
        reference_stderr=[s for _, s in reference],
        sampling_stderr=[s for _, s in sampling],
        gap=sum(diffs) / len(diffs),
        gap_stderr=sum(combined_se) / len(combined_se),
        end_signed_gap=smp_mean[-1] - ref_mean[-1],
    )


# ─── Adversarial latent attack ────────────────────────────────────────────────

def latent_objective(predictor: EpsPredictor, z: torch.Tensor, T: int) -> torch.Tensor:
    """Per-sample ‖ε_θ(z, T) − z‖²: the ε-regression loss at the first reverse step."""
    t = torch.full((z.shape[0],), T, dtype=torch.long)
    return (predictor(z, t) - z).to(torch.float64).pow(2).flatten(1).sum(dim=1)


def latent_attack(
    predictor: EpsPredictor,
    sched: NoiseSchedule,
    latents: torch.Tensor,
    strength: float,
    steps: int,
    amplify: float = 1.0,
) -> torch.Tensor:
    """
    Normalised gradient ascent on `latent_objective` w.r.t. the initial latents.

    Each sample's perturbation is capped at strength·amplify·√d in ℓ2 and
    grows by budget/steps per step.  Strength 0 returns the latents unchanged.
    """
    if strength < 0 or amplify < 0:
        raise ConfigurationError("Attack strength and amplification must be ≥ 0.")
    if steps < 1:
        raise ConfigurationError(f"Attack needs at least one ascent step, got {steps}.")
    z = latents.detach()
    budget = strength * amplify * math.sqrt(z[0].numel()) if z.shape[0] else 0.0
    if budget == 0.0:
        return z.clone()

    step_size = budget / steps
    delta = torch.zeros_like(z)
    for step_index in range(steps):
        with torch.enable_grad():
            probe = (z + delta).requires_grad_(True)
            objective = latent_objective(predictor, probe, sched.T).sum()
            (g,) = torch.autograd.grad(objective, probe)
        if not torch.isfinite(g).all() or not torch.isfinite(objective):
            raise AttackDivergenceError(step_index)
        g_norm = torch.linalg.vector_norm(g.flatten(1), dim=1).clamp_min(1e-30)
        direction = g / g_norm.reshape(-1, *([1] * (z.dim() - 1)))
        delta = delta + step_size * direction
        d_norm = torch.linalg.vector_norm(delta.flatten(1), dim=1)
        shrink = torch.clamp(budget / d_norm.clamp_min(1e-30), max=1.0)
        delta = delta * shrink.reshape(-1, *([1] * (z.dim() - 1)))
    return (z + delta).detach()


# ─── Sweep ────────────────────────────────────────────────────────────────────

def robustness_sweep(
    model: EpsModel,
    variants: Mapping[str, ParamVector],
    bits: Sequence[int],
    respacings: Sequence[Respacing],
    sched: NoiseSchedule,
    target: torch.Tensor,
    n: int,
    cfg: DistanceConfig,
    rng: Rng,
) -> list[SweepRow]:
    """
    Distance to `target` for every (variant, bits, T′) cell, with the delta
    against the unquantized model on the same sampler noise.  A failing cell is
    reported with status "failed" and the sweep moves on.
    """
    cells: dict[tuple[str, int, str], SweepRow] = {}
    labels: list[str] = []
    for variant, params in variants.items():
        for spacing in respacings:
            respacing = RespacingMap.resolve(spacing, sched.T)
            labels.append(respacing.label)
            fp32_value = None
            for b in sorted(set(bits) | {FP32_BITS}, reverse=True):
                key = (variant, b, respacing.label)
                try:
                    quantized = quantize(params, QuantSpec(b))
                    samples = ddpm_sample(model.bind(quantized), n, sched, respacing,
                                          sampler_stream(rng, respacing.label), dim=int(target.shape[1]))
                    value = distance(samples, target, cfg, distance_stream(rng)).value
                except FlatDiffError as exc:
                    logger.warning("Sweep cell %s failed: %s", key, exc)
                    cells[key] = SweepRow(variant=variant, bits=b, respacing=respacing.label,
                                          metric=cfg.kind.value, status="failed", error=str(exc))
                    continue
                if b == FP32_BITS:
                    fp32_value = value
                delta = value - fp32_value if fp32_value is not None else None
                logger.debug("Sweep %s → %.5f", key, value)
                cells[key] = SweepRow(variant=variant, bits=b, respacing=respacing.label,
                                      metric=cfg.kind.value, value=value, delta_vs_fp32=delta)

    order = {label: i for i, label in enumerate(dict.fromkeys(labels))}
    names = {name: i for i, name in enumerate(variants)}
    bit_order = {b: i for i, b in enumerate(bits)}
    return [
        row for key, row in sorted(
            cells.items(), key=lambda kv: (names[kv[0][0]], bit_order.get(kv[0][1], -1), order[kv[0][2]])
        )
        if key[1] in bit_order
    ]
