"""
core/theory.py — Random-feature score model and the closed forms that tie
parameter flatness to robustness against prior perturbations.

Notation used throughout (all float64):
  s_θ(x)  = (1/m)·θ·σ(Wᵀx + Uᵀe)          θ, W: d×m   U: d_e×m   e: d_e
  δ_w     = δWᵀ  (d×d, required symmetric)
  δ_u     = δUᵀe (d)
  I(x,δ)  = (1/2m)·xᵀδ_w x + (1/m)·xᵀδ_u + C
  p̂(x)    = e^{−I(x,δ)}·p(x)

For a standard normal p, p̂ is the Gaussian N(μ_δ, Σ_δ) with
Σ_δ = (I + δ_w/m)⁻¹ and μ_δ = −(1/m)·Σ_δ·δ_u.  Every identity here has a
brute-force oracle next to it (quadrature, Monte-Carlo, importance sampling).
"""
from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import torch

from core.errors import ConfigurationError, InvariantViolationError, RegimeError
from core.numerics import Rng

logger = logging.getLogger(__name__)

F64 = torch.float64
SYMMETRY_TOL = 1e-10
BOUND_SLACK = 1e-9

ScoreFn = Callable[[torch.Tensor], torch.Tensor]
FeatureActivation = Literal["identity", "relu"]


# ─── Model and prior ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RandomFeatureScoreModel:
    theta: torch.Tensor                         # d×m, learnable
    W: torch.Tensor                             # d×m, frozen
    U: torch.Tensor                             # d_e×m, frozen
    e: torch.Tensor                             # d_e
    activation: FeatureActivation = "identity"

    def __post_init__(self) -> None:
        d, m = self.W.shape
        if self.theta.shape != (d, m):
            raise ConfigurationError(f"theta must be {d}×{m}, got {tuple(self.theta.shape)}.")
        if self.U.shape[1] != m or self.U.shape[0] != self.e.shape[0]:
            raise ConfigurationError("U must be d_e×m with d_e = len(e).")
        for name in ("theta", "W", "U", "e"):
            object.__setattr__(self, name, getattr(self, name).detach().to(F64).clone())

    @property
    def d(self) -> int:
        return int(self.W.shape[0])

    @property
    def m(self) -> int:
        return int(self.W.shape[1])

    def pre_activation(self, x: torch.Tensor) -> torch.Tensor:
        """Wᵀx + Uᵀe for a batch x of shape (n, d) → (n, m)."""
        return x.to(F64) @ self.W + (self.U.T @ self.e)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.pre_activation(x)
        return torch.relu(h) if self.activation == "relu" else h

    def score(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x) @ self.theta.T / self.m

    def shifted(self, delta: torch.Tensor) -> "RandomFeatureScoreModel":
        """Same frozen features, parameters θ + δ."""
        return replace(self, theta=self.theta + delta.to(F64))


def random_instance(
    rng: Rng,
    d: int,
    m: int,
    d_e: Optional[int] = None,
    activation: FeatureActivation = "identity",
) -> RandomFeatureScoreModel:
    d_e = d_e or d
    return RandomFeatureScoreModel(
        theta=rng.normal((d, m), dtype=F64),
        W=rng.normal((d, m), dtype=F64),
        U=rng.normal((d_e, m), dtype=F64),
        e=rng.normal((d_e,), dtype=F64),
        activation=activation,
    )


@dataclass(frozen=True)
class GaussianPrior:
    mean: torch.Tensor
    cov: torch.Tensor

    @classmethod
    def standard(cls, d: int) -> "GaussianPrior":
        return cls(torch.zeros(d, dtype=F64), torch.eye(d, dtype=F64))

    def grad_log_density(self, x: torch.Tensor) -> torch.Tensor:
        """−Σ⁻¹(x − μ) for a batch (n, d)."""
        centred = x.to(F64) - self.mean
        return -torch.linalg.solve(self.cov, centred.T).T

    def sample(self, n: int, rng: Rng) -> torch.Tensor:
        chol = torch.linalg.cholesky(self.cov)
        return self.mean + rng.normal((n, self.mean.numel()), dtype=F64) @ chol.T


def score_loss(model: RandomFeatureScoreModel, x: torch.Tensor, grad_log_p: ScoreFn) -> torch.Tensor:
    """Pointwise ‖s_θ(x) − ∇log p(x)‖² for a batch (n, d)."""
    if x.shape[-1] != model.d:
        raise ConfigurationError(f"Points have dimension {x.shape[-1]}, model expects {model.d}.")
    return (model.score(x) - grad_log_p(x.to(F64))).pow(2).sum(dim=-1)


# ─── Perturbation exponent ────────────────────────────────────────────────────

def delta_terms(delta: torch.Tensor, model: RandomFeatureScoreModel) -> tuple[torch.Tensor, torch.Tensor]:
    """(δ_w, δ_u) = (δWᵀ, δUᵀe); raises RegimeError if δWᵀ is not symmetric."""
    delta = delta.to(F64)
    if delta.shape != model.W.shape:
        raise ConfigurationError(f"δ must be {model.d}×{model.m}, got {tuple(delta.shape)}.")
    delta_w = delta @ model.W.T
    asym = float((delta_w - delta_w.T).abs().max()) if delta_w.numel() else 0.0
    if asym > SYMMETRY_TOL * max(1.0, float(delta_w.abs().max())):
        raise RegimeError(f"δWᵀ is not symmetric (max asymmetry {asym:.3e}).")
    delta_u = delta @ (model.U.T @ model.e)
    return delta_w, delta_u


def perturbation_exponent(
    x: torch.Tensor,
    delta: torch.Tensor,
    model: RandomFeatureScoreModel,
    C: float = 0.0,
) -> torch.Tensor:
    """I(x, δ) per point."""
    delta_w, delta_u = delta_terms(delta, model)
    x = x.to(F64)
    quad = ((x @ delta_w) * x).sum(dim=-1) / (2 * model.m)
    return quad + x @ delta_u / model.m + C


def exponent_gradient(x: torch.Tensor, delta: torch.Tensor, model: RandomFeatureScoreModel) -> torch.Tensor:
    """∇ₓI = (1/m)(δ_w x + δ_u)."""
    delta_w, delta_u = delta_terms(delta, model)
    return (x.to(F64) @ delta_w.T + delta_u) / model.m


def loss_equality_check(
    model: RandomFeatureScoreModel,
    delta: torch.Tensor,
    prior: GaussianPrior,
    x: torch.Tensor,
) -> float:
    """
    max over the batch of |L(x; θ+δ, p) − L(x; θ, p̂)| with ∇log p̂ = ∇log p − ∇I.

    relu features are only in regime when every pre-activation is strictly positive.
    """
    if model.activation == "relu":
        lowest = float(model.pre_activation(x).min())
        if lowest <= 0:
            raise RegimeError(f"relu pre-activation {lowest:.3e} ≤ 0: loss equality not claimed here.")

    def grad_log_p_hat(points: torch.Tensor) -> torch.Tensor:
        return prior.grad_log_density(points) - exponent_gradient(points, delta, model)

    perturbed_params = score_loss(model.shifted(delta), x, prior.grad_log_density)
    perturbed_prior = score_loss(model, x, grad_log_p_hat)
    return float((perturbed_params - perturbed_prior).abs().max())


# ─── Perturbed Gaussian ───────────────────────────────────────────────────────

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class PerturbedGaussian:
    mean: torch.Tensor
    cov: torch.Tensor
    delta: Optional[torch.Tensor] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        cov = self.cov.to(F64)
        if (cov - cov.T).abs().max() > SYMMETRY_TOL * max(1.0, float(cov.abs().max())):
            raise RegimeError("Covariance is not symmetric.")
        lowest = float(torch.linalg.eigvalsh(cov).min())
        if lowest <= 0:
            raise RegimeError(f"Covariance is not positive definite (eigenvalue {lowest:.3e}).", lowest)

    @property
    def d(self) -> int:
        return int(self.mean.numel())

    @property
    def precision(self) -> torch.Tensor:
        return torch.linalg.inv(self.cov)

    def log_density(self, x: torch.Tensor) -> torch.Tensor:
        centred = x.to(F64) - self.mean
        chol = torch.linalg.cholesky(self.cov)
        solved = torch.linalg.solve_triangular(chol, centred.T, upper=False)
        log_det = 2 * torch.log(torch.diagonal(chol)).sum()
        return -0.5 * (solved.pow(2).sum(dim=0) + log_det + self.d * LOG_2PI)

    def sample(self, n: int, rng: Rng) -> torch.Tensor:
        chol = torch.linalg.cholesky(self.cov)
        return self.mean + rng.normal((n, self.d), dtype=F64) @ chol.T


def standard_normal_log_density(x: torch.Tensor) -> torch.Tensor:
    x = x.to(F64)
    return -0.5 * (x.pow(2).sum(dim=-1) + x.shape[-1] * LOG_2PI)


def perturbed_gaussian(delta: torch.Tensor, model: RandomFeatureScoreModel) -> PerturbedGaussian:
    """Σ_δ = (I + δ_w/m)⁻¹, μ_δ = −(1/m)·Σ_δ·δ_u."""
    delta_w, delta_u = delta_terms(delta, model)
    precision = torch.eye(model.d, dtype=F64) + delta_w / model.m
    precision = (precision + precision.T) / 2
    lowest = float(torch.linalg.eigvalsh(precision).min())
    if lowest <= 0:
        raise RegimeError(f"I + δWᵀ/m is not positive definite (eigenvalue {lowest:.6g}).", lowest)
    cov = torch.linalg.inv(precision)
    cov = (cov + cov.T) / 2
    mean = -(cov @ delta_u) / model.m
    return PerturbedGaussian(mean=mean, cov=cov, delta=delta.to(F64).clone())


def normalization_constant(delta: torch.Tensor, model: RandomFeatureScoreModel) -> float:
    """C = (1/2m²)·δ_uᵀΣ_δδ_u + ½·log|Σ_δ|."""
    pg = perturbed_gaussian(delta, model)
    _, delta_u = delta_terms(delta, model)
    _, log_det = torch.linalg.slogdet(pg.cov)
    return float(delta_u @ pg.cov @ delta_u) / (2 * model.m ** 2) + 0.5 * float(log_det)


def gaussian_kl(pg: PerturbedGaussian) -> float:
    """KL(N(0, I) ‖ N(μ, Σ)) = ½[log|Σ| − d + tr Σ⁻¹ + μᵀΣ⁻¹μ]."""
    precision = pg.precision
    _, log_det = torch.linalg.slogdet(pg.cov)
    quad = float(pg.mean @ precision @ pg.mean)
    return 0.5 * (float(log_det) - pg.d + float(torch.trace(precision)) + quad)


# ─── Oracles ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class QuadratureResult:
    density_mismatch: float     # max |e^{−I}·N(0,I) − N(μ_δ, Σ_δ)| on the grid
    total_mass: float           # ∫ N(μ_δ, Σ_δ) by the same rule
    quadrature_C: float
    closed_C: float


def trapezoid_grid(d: int, extent: float, resolution: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Tensor-product trapezoid nodes (N, d) and weights (N,) on [−extent, extent]^d."""
    axis = torch.linspace(-extent, extent, resolution, dtype=F64)
    h = 2 * extent / (resolution - 1)
    w = torch.full((resolution,), h, dtype=F64)
    w[0] = w[-1] = h / 2
    nodes = torch.cartesian_prod(*([axis] * d)).reshape(-1, d)
    weights = torch.ones(nodes.shape[0], dtype=F64)
    for grid_w in torch.meshgrid(*([w] * d), indexing="ij"):
        weights = weights * grid_w.reshape(-1)
    return nodes, weights


def quadrature_check(
    delta: torch.Tensor,
    model: RandomFeatureScoreModel,
    extent: float = 8.0,
    resolution: int = 400,
) -> QuadratureResult:
    if model.d > 3:
        raise ConfigurationError(f"Grid quadrature is limited to d ≤ 3, got d={model.d}.")
    pg = perturbed_gaussian(delta, model)
    closed_C = normalization_constant(delta, model)
    nodes, weights = trapezoid_grid(model.d, extent, resolution)

    unnormalised = torch.exp(-perturbation_exponent(nodes, delta, model) + standard_normal_log_density(nodes))
    quadrature_C = math.log(float((weights * unnormalised).sum()))
    target = torch.exp(pg.log_density(nodes))
    tilted = unnormalised * math.exp(-closed_C)
    return QuadratureResult(
        density_mismatch=float((tilted - target).abs().max()),
        total_mass=float((weights * target).sum()),
        quadrature_C=quadrature_C,
        closed_C=closed_C,
    )


def monte_carlo_kl(pg: PerturbedGaussian, n: int, rng: Rng) -> tuple[float, float]:
    """KL(N(0,I) ‖ pg) as the mean log-ratio over n standard-normal draws, with its stderr."""
    x = rng.normal((n, pg.d), dtype=F64)
    ratio = standard_normal_log_density(x) - pg.log_density(x)
    return float(ratio.mean()), float(ratio.std(correction=1)) / math.sqrt(n)


def importance_mean(
    delta: torch.Tensor,
    model: RandomFeatureScoreModel,
    n: int,
    rng: Rng,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Self-normalised importance estimate of the mean of e^{−I}·N(0, I) using
    N(0, I) proposals, with per-coordinate delta-method standard errors.
    """
    x = rng.normal((n, model.d), dtype=F64)
    log_w = -perturbation_exponent(x, delta, model)
    w = torch.exp(log_w - log_w.max())
    total = w.sum()
    mean = (w.unsqueeze(1) * x).sum(dim=0) / total
    stderr = torch.sqrt((w.pow(2).unsqueeze(1) * (x - mean).pow(2)).sum(dim=0)) / total
    return mean, stderr


# ─── Admissible perturbations ─────────────────────────────────────────────────

class AdmissibleDeltaSampler:
    """
    Draws δ with δWᵀ symmetric via δ = S·(W⁺)ᵀ for a random symmetric S, then
    rescales it to a uniform Frobenius radius in (0, Δ].  Draws whose
    I + δWᵀ/m is not positive definite are rejected.
    """

    def __init__(self, model: RandomFeatureScoreModel, rng: Rng, max_attempts: int = 200) -> None:
        rank = int(torch.linalg.matrix_rank(model.W))
        if rank < model.d:
            raise ConfigurationError(f"W has rank {rank} < d={model.d}; cannot build admissible δ.")
        self.model = model
        self.rng = rng
        self.max_attempts = max_attempts
        self.W_pinv_T = torch.linalg.pinv(model.W).T        # d×m
        self.rejections = 0

    def direction(self) -> torch.Tensor:
        a = self.rng.normal((self.model.d, self.model.d), dtype=F64)
        delta = ((a + a.T) / 2) @ self.W_pinv_T
        return delta / torch.linalg.matrix_norm(delta)

    def sample(self, radius: float, fixed_norm: bool = False) -> torch.Tensor:
        if radius < 0:
            raise ConfigurationError(f"Ball radius must be ≥ 0, got {radius}.")
        if radius == 0:
            return torch.zeros_like(self.model.W)
        for _ in range(self.max_attempts):
            scale = radius if fixed_norm else radius * float(1.0 - self.rng.uniform((1,), dtype=F64))
            delta = scale * self.direction()
            precision = torch.eye(self.model.d, dtype=F64) + delta @ self.model.W.T / self.model.m
            if float(torch.linalg.eigvalsh((precision + precision.T) / 2).min()) > 0:
                return delta
            self.rejections += 1
        raise ConfigurationError(
            f"No admissible δ with ‖δ‖ ≤ {radius} after {self.max_attempts} attempts."
        )


def perturbed_set_probe(
    model: RandomFeatureScoreModel,
    radius: float,
    n: int,
    sampler: AdmissibleDeltaSampler,
) -> list[PerturbedGaussian]:
    """n members of the perturbed-prior set of radius Δ; Δ = 0 gives the standard normal."""
    if n < 1:
        raise ConfigurationError(f"Need at least one member, got n={n}.")
    if radius == 0:
        return [perturbed_gaussian(torch.zeros_like(model.W), model)]
    return [perturbed_gaussian(sampler.sample(radius), model) for _ in range(n)]


# ─── KL bound ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BoundSample:
    delta: torch.Tensor
    kl_closed: float
    kl_sigma_d_bound: float       # mean term with coefficient σ_d
    kl_eigen_bound: float       # mean term with coefficient max(σ_d, 1/σ_1); always valid
    eigenvalues: list[float]    # of Σ_δ⁻¹, ascending

    @property
    def violates(self) -> bool:
        return self.kl_closed > self.kl_eigen_bound + BOUND_SLACK

    @property
    def exceeds_sigma_d_bound(self) -> bool:
        return self.kl_closed > self.kl_sigma_d_bound + BOUND_SLACK


@dataclass(frozen=True)
class GapBound:
    radius: float
    samples: list[BoundSample]

    @property
    def kl_closed(self) -> float:
        return max(s.kl_closed for s in self.samples)

    @property
    def kl_eigen_bound(self) -> float:
        return max(s.kl_eigen_bound for s in self.samples)

    @property
    def violations(self) -> list[BoundSample]:
        return [s for s in self.samples if s.violates]

    @property
    def sigma_d_bound_exceedances(self) -> int:
        return sum(s.exceeds_sigma_d_bound for s in self.samples)


def kl_bounds(delta: torch.Tensor, radius: float, model: RandomFeatureScoreModel) -> BoundSample:
    """
    ½[Σᵢ(σᵢ − log σᵢ) − d + (c/m²)·‖Uᵀe‖²·Δ²] with σᵢ the eigenvalues of Σ_δ⁻¹.

    The mean term μᵀΣ⁻¹μ = δ_uᵀΣδ_u/m² is at most ‖Uᵀe‖²Δ²/(σ_1 m²), so the
    certified coefficient is c = max(σ_d, 1/σ_1); c = σ_d is the tighter form
    that only holds when σ_1·σ_d ≥ 1.
    """
    pg = perturbed_gaussian(delta, model)
    sigma = torch.linalg.eigvalsh(pg.precision)
    spectral = float((sigma - torch.log(sigma)).sum()) - model.d
    mean_scale = float((model.U.T @ model.e).pow(2).sum()) * radius ** 2 / model.m ** 2
    s_1, s_d = float(sigma[0]), float(sigma[-1])
    return BoundSample(
        delta=delta.to(F64).clone(),
        kl_closed=gaussian_kl(pg),
        kl_sigma_d_bound=0.5 * (spectral + s_d * mean_scale),
        kl_eigen_bound=0.5 * (spectral + max(s_d, 1.0 / s_1) * mean_scale),
        eigenvalues=[float(v) for v in sigma],
    )


def violation_record(sample: BoundSample, model: RandomFeatureScoreModel) -> dict:
    return {
        "delta": sample.delta.tolist(),
        "W": model.W.tolist(),
        "U": model.U.tolist(),
        "e": model.e.tolist(),
        "m": model.m,
        "kl_closed": sample.kl_closed,
        "kl_eigen_bound": sample.kl_eigen_bound,
    }


def eigen_gap_bound(
    radius: float,
    model: RandomFeatureScoreModel,
    sampler: AdmissibleDeltaSampler,
    n_samples: int,
    strict: bool = True,
) -> GapBound:
    """
    KL and its eigenvalue bound for n admissible δ with ‖δ‖_F ≤ Δ.  With
    `strict`, the first violation raises InvariantViolationError carrying δ.
    """
    if radius < 0:
        raise ConfigurationError(f"Ball radius must be ≥ 0, got {radius}.")
    deltas = [torch.zeros_like(model.W)] if radius == 0 else [sampler.sample(radius) for _ in range(n_samples)]
    samples = []
    for delta in deltas:
        sample = kl_bounds(delta, radius, model)
        if sample.violates and strict:
            raise InvariantViolationError(
                f"KL {sample.kl_closed:.6g} exceeds the eigenvalue bound {sample.kl_eigen_bound:.6g}.",
                record=violation_record(sample, model),
            )
        samples.append(sample)
    bound = GapBound(radius=radius, samples=samples)
    if bound.sigma_d_bound_exceedances:
        logger.debug("Δ=%g: %d samples exceed the σ_d-coefficient bound", radius, bound.sigma_d_bound_exceedances)
    return bound


# ─── Flat-minimum probe ───────────────────────────────────────────────────────

def fit_least_squares(
    W: torch.Tensor,
    U: torch.Tensor,
    e: torch.Tensor,
    prior: GaussianPrior,
    x: torch.Tensor,
    activation: FeatureActivation = "identity",
) -> RandomFeatureScoreModel:
    """θ minimising Σₓ‖s_θ(x) − ∇log p(x)‖² over the batch x."""
    probe = RandomFeatureScoreModel(theta=torch.zeros_like(W), W=W, U=U, e=e, activation=activation)
    design = probe.features(x) / probe.m
    target = prior.grad_log_density(x)
    theta_T = torch.linalg.lstsq(design, target).solution
    return replace(probe, theta=theta_T.T.contiguous())


@dataclass(frozen=True)
class LossVariation:
    inside: list[float]         # mean loss of θ under each in-set prior
    outside: list[float]        # … under priors drawn from the shell outside the ball


def probe_loss_variation(
    model: RandomFeatureScoreModel,
    x: torch.Tensor,
    radius: float,
    n: int,
    sampler: AdmissibleDeltaSampler,
    outer_factor: float = 4.0,
) -> LossVariation:
    """
    Mean score loss of θ against p̂_δ for δ inside the Δ-ball and for δ on the
    shell of radius outer_factor·Δ, with p standard normal.
    """
    prior = GaussianPrior.standard(model.d)

    def mean_loss(delta: torch.Tensor) -> float:
        def grad_log_p_hat(points: torch.Tensor) -> torch.Tensor:
            return prior.grad_log_density(points) - exponent_gradient(points, delta, model)

        return float(score_loss(model, x, grad_log_p_hat).mean())

    inside = [mean_loss(sampler.sample(radius)) for _ in range(n)]
    outside = [mean_loss(sampler.sample(outer_factor * radius, fixed_norm=True)) for _ in range(n)]
    return LossVariation(inside=inside, outside=outside)
