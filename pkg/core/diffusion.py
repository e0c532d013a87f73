"""
core/diffusion.py — Variance schedules, forward noising, the ε-regression loss
and the respaced ancestral (DDPM) sampler.

Schedules are held in float64; sampler coefficients are computed from them as
Python floats so that a chain's arithmetic does not depend on the model dtype.
Timesteps are 1-based throughout: t ∈ {1, …, T}.
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from typing import Optional, Union

import torch

from core.errors import ConfigurationError, SamplingDivergenceError
from core.networks import EpsPredictor
from core.numerics import Rng
from models.run_config import Respacing, ScheduleConfig

logger = logging.getLogger(__name__)

Timesteps = Union[int, torch.Tensor]
TraceHook = Callable[[int, int, torch.Tensor, torch.Tensor], None]


# ─── Schedules ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NoiseSchedule:
    beta: torch.Tensor          # float64[T]
    alpha: torch.Tensor         # 1 − β
    alpha_bar: torch.Tensor     # cumulative product of α

    @property
    def T(self) -> int:
        return int(self.beta.numel())

    def alpha_bar_at(self, t: Timesteps) -> torch.Tensor:
        """ᾱ_t for a scalar or per-sample timestep tensor; raises IndexError outside 1..T."""
        t_tensor = torch.as_tensor(t, dtype=torch.long)
        if t_tensor.numel() and (int(t_tensor.min()) < 1 or int(t_tensor.max()) > self.T):
            raise IndexError(f"Timestep out of range 1..{self.T}: {t}")
        return self.alpha_bar[t_tensor - 1]


def _from_betas(beta: torch.Tensor) -> NoiseSchedule:
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, dim=0))


def linear_schedule(T: int, beta_1: float, beta_T: float) -> NoiseSchedule:
    """β linearly interpolated from beta_1 to beta_T inclusive."""
    if T < 1:
        raise ConfigurationError(f"Schedule length must be ≥ 1, got T={T}.")
    if not (0 < beta_1 <= beta_T < 1):
        raise ConfigurationError(
            f"Schedule bounds must satisfy 0 < beta_1 ≤ beta_T < 1, got ({beta_1}, {beta_T})."
        )
    if T == 1 and beta_1 != beta_T:
        raise ConfigurationError("A single-step schedule needs beta_1 == beta_T.")
    return _from_betas(torch.linspace(beta_1, beta_T, T, dtype=torch.float64))


def scaled_linear_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear schedule with both endpoints scaled by 1000/T, so ᾱ_T stays near 0 for short chains."""
    scale = 1000.0 / T if T >= 1 else 0.0
    return linear_schedule(T, beta_1 * scale, beta_T * scale)


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return linear_schedule(cfg.T, cfg.beta_1, cfg.beta_T)


# ─── Respacing ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RespacingMap:
    T: int
    indices: tuple[int, ...]    # strictly increasing subsequence of 1..T ending at T

    def __post_init__(self) -> None:
        idx = self.indices
        if not idx or idx[-1] != self.T or idx[0] < 1:
            raise ConfigurationError(f"Respacing must end at T={self.T} and start ≥ 1.")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigurationError("Respacing indices must be strictly increasing.")

    @property
    def T_prime(self) -> int:
        return len(self.indices)

    @property
    def label(self) -> str:
        return "full" if self.T_prime == self.T else str(self.T_prime)

    @classmethod
    def identity(cls, T: int) -> "RespacingMap":
        return cls(T, tuple(range(1, T + 1)))

    @classmethod
    def evenly_spaced(cls, T: int, T_prime: int) -> "RespacingMap":
        """Rounded, evenly spaced indices round(linspace(1, T, T′))."""
        if not (1 <= T_prime <= T):
            raise ConfigurationError(f"Respacing T′={T_prime} must lie in 1..{T}.")
        if T_prime == 1:
            return cls(T, (T,))
        grid = torch.linspace(1, T, T_prime, dtype=torch.float64)
        return cls(T, tuple(int(v) for v in torch.floor(grid + 0.5)))

    @classmethod
    def resolve(cls, spec: Respacing, T: int) -> "RespacingMap":
        if spec == "full":
            return cls.identity(T)
        return cls.evenly_spaced(T, int(spec))

    def effective(self, sched: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
        """(β_k, ᾱ_k) of the shortened chain: β_k = 1 − ᾱ_{τ_k}/ᾱ_{τ_{k−1}}, ᾱ_{τ_0} = 1."""
        if self.T != sched.T:
            raise ConfigurationError(f"Respacing built for T={self.T}, schedule has T={sched.T}.")
        alpha_bar = sched.alpha_bar_at(torch.tensor(self.indices))
        previous = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        return 1.0 - alpha_bar / previous, alpha_bar


# ─── Forward process and loss ─────────────────────────────────────────────────

def noise_at(x0: torch.Tensor, alpha_bar: torch.Tensor | float, eps: torch.Tensor) -> torch.Tensor:
    """√ᾱ·x0 + √(1−ᾱ)·eps with ᾱ broadcast per sample."""
    ab = torch.as_tensor(alpha_bar, dtype=torch.float64)
    if ab.dim() == 1:
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    ab = ab.to(x0.dtype)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * eps


def forward_noise(x0: torch.Tensor, t: Timesteps, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != x0.shape:
        raise ConfigurationError(f"eps shape {tuple(eps.shape)} differs from x0 {tuple(x0.shape)}.")
    return noise_at(x0, sched.alpha_bar_at(t), eps)


@dataclass(frozen=True)
class NoiseDraw:
    """One Monte-Carlo draw of the ε-objective: data, timesteps, target noise, IP noise."""

    x0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    xi: torch.Tensor

    @property
    def batch_size(self) -> int:
        return int(self.x0.shape[0])


def draw_noise(x0: torch.Tensor, sched: NoiseSchedule, rng: Rng) -> NoiseDraw:
    if x0.numel() == 0 or x0.shape[0] == 0:
        raise ConfigurationError("Cannot evaluate the diffusion loss on an empty batch.")
    t = rng.integers(1, sched.T + 1, (x0.shape[0],))
    eps = rng.normal(x0.shape, dtype=x0.dtype)
    xi = rng.normal(x0.shape, dtype=x0.dtype)
    return NoiseDraw(x0=x0, t=t, eps=eps, xi=xi)


def noise_regression_loss(
    predictor: EpsPredictor,
    draw: NoiseDraw,
    sched: NoiseSchedule,
    ip_strength: float = 0.0,
) -> torch.Tensor:
    """
    Mean over the batch of ‖ε_θ(x_t, t) − ε‖², reduced in float64.

    With ip_strength > 0 the network input is noised with ε + γ·ξ while the
    regression target stays ε.
    """
    if ip_strength < 0:
        raise ConfigurationError(f"ip_strength must be ≥ 0, got {ip_strength}.")
    noise_in = draw.eps + ip_strength * draw.xi if ip_strength > 0 else draw.eps
    x_t = forward_noise(draw.x0, draw.t, noise_in, sched)
    residual = predictor(x_t, draw.t) - draw.eps
    per_sample = residual.to(torch.float64).pow(2).flatten(1).sum(dim=1)
    return per_sample.mean()


def diffusion_loss(
    predictor: EpsPredictor,
    batch: torch.Tensor,
    sched: NoiseSchedule,
    rng: Rng,
    ip_strength: float = 0.0,
) -> torch.Tensor:
    return noise_regression_loss(predictor, draw_noise(batch, sched, rng), sched, ip_strength)


# ─── Sampling ─────────────────────────────────────────────────────────────────

@torch.no_grad()
def ddpm_sample(
    predictor: EpsPredictor,
    n: int,
    sched: NoiseSchedule,
    respacing: RespacingMap,
    rng: Rng,
    dim: int = 2,
    x_T: Optional[torch.Tensor] = None,
    trace: Optional[TraceHook] = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """
    Ancestral sampling through the respaced chain from x_T ~ N(0, I).

    The predictor is queried with the original timestep τ_k.  Each step uses
    the posterior mean (x − β_k/√(1−ᾱ_k)·ε̂)/√α_k and variance β̃_k; the last
    step adds no noise.  `trace(step_index, timestep, x, eps_hat)` is called
    before every update.  Raises SamplingDivergenceError on a non-finite state.
    """
    beta, alpha_bar = respacing.effective(sched)
    x = x_T.detach().clone().to(dtype) if x_T is not None else rng.normal((n, dim), dtype=dtype)
    K = respacing.T_prime

    for step_index, k in enumerate(reversed(range(K))):
        timestep = respacing.indices[k]
        b, ab = float(beta[k]), float(alpha_bar[k])
        ab_prev = float(alpha_bar[k - 1]) if k > 0 else 1.0
        t = torch.full((x.shape[0],), timestep, dtype=torch.long)

        eps_hat = predictor(x, t)
        if trace is not None:
            trace(step_index, timestep, x, eps_hat)

        mean = (x - (b / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(1.0 - b)
        if k > 0:
            variance = b * (1.0 - ab_prev) / (1.0 - ab)
            x = mean + math.sqrt(variance) * rng.normal(x.shape, dtype=dtype)
        else:
            x = mean

        if not torch.isfinite(x).all():
            logger.error("Non-finite sampler state at step %d (t=%d)", step_index, timestep)
            raise SamplingDivergenceError(step_index, timestep)
    return x


# ─── Exact-score oracle ───────────────────────────────────────────────────────

def analytic_gaussian_eps(c: float, sched: NoiseSchedule) -> EpsPredictor:
    """Optimal ε predictor for x0 ~ N(0, c²I): √(1−ᾱ_t)·x_t / (ᾱ_t·c² + 1 − ᾱ_t)."""
    if c <= 0:
        raise ConfigurationError(f"Data scale c must be positive, got {c}.")
    c2 = float(c) ** 2

    def predict(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        ab = sched.alpha_bar_at(t).reshape(-1, *([1] * (x.dim() - 1)))
        coef = torch.sqrt(1 - ab) / (ab * c2 + 1 - ab)
        return coef.to(x.dtype) * x

    return predict
