"""
core/certification.py — The theory certification suite run by `theory-verify`.

Each check draws its own instances from a labelled sub-stream of the suite
seed, compares a closed form with its brute-force oracle and returns a
CheckResult.  `quick=True` shrinks instance counts and Monte-Carlo sizes for
the unit tests; tolerances are never relaxed.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import torch

from core.numerics import Rng
from core.theory import (
    AdmissibleDeltaSampler,
    GaussianPrior,
    RandomFeatureScoreModel,
    eigen_gap_bound,
    gaussian_kl,
    importance_mean,
    kl_bounds,
    loss_equality_check,
    monte_carlo_kl,
    perturbed_gaussian,
    quadrature_check,
    random_instance,
    violation_record,
)
from models.reports import CertificationReport, CheckResult

logger = logging.getLogger(__name__)

F64 = torch.float64


@dataclass(frozen=True)
class SuiteSize:
    equality_instances: int = 100
    density_instances: int = 50
    quadrature_resolution: int = 400
    kl_instances: int = 5
    kl_mc_samples: int = 1_000_000
    bound_samples: int = 1000
    sign_instances: int = 20
    sign_mc_samples: int = 200_000

    @classmethod
    def quick(cls) -> "SuiteSize":
        return cls(equality_instances=12, density_instances=4, quadrature_resolution=200,
                   kl_instances=2, kl_mc_samples=1_000_000, bound_samples=100,
                   sign_instances=4, sign_mc_samples=100_000)


def scaled_delta(
    sampler: AdmissibleDeltaSampler,
    model: RandomFeatureScoreModel,
    target: float,
    max_shift: float = math.inf,
) -> torch.Tensor:
    """
    Admissible δ rescaled so that ‖δWᵀ/m‖_F = target (positive definite for
    target < 1), shrunk further if ‖δUᵀe/m‖ would exceed `max_shift`.
    """
    direction = sampler.direction()
    size = float(torch.linalg.matrix_norm(direction @ model.W.T)) / model.m
    delta = direction * (target / size)
    shift = float(torch.linalg.vector_norm(delta @ (model.U.T @ model.e))) / model.m
    return delta * (max_shift / shift) if shift > max_shift else delta


# ─── Checks ───────────────────────────────────────────────────────────────────

def check_loss_equality(rng: Rng, size: SuiteSize) -> CheckResult:
    worst = 0.0
    shapes = [(d, m) for d in (2, 3, 5) for m in (4, 8)]
    for i in range(size.equality_instances):
        d, m = shapes[i % len(shapes)]
        inst = rng.child("equality", i)
        model = random_instance(inst.child("model"), d, m)
        delta = scaled_delta(AdmissibleDeltaSampler(model, inst.child("delta")), model, 0.5)
        x = inst.child("x").normal((64, d), dtype=F64)
        worst = max(worst, loss_equality_check(model, delta, GaussianPrior.standard(d), x))
    return CheckResult(name="loss_equality", regime="identity activation, p = N(0, I)",
                       tolerance=1e-10, discrepancy=worst, passed=worst <= 1e-10, seed=rng.seed,
                       details={"instances": size.equality_instances})


def check_loss_equality_relu(rng: Rng, size: SuiteSize) -> CheckResult:
    """relu features kept in their linear regime by a large positive bias Uᵀe."""
    worst = 0.0
    n = max(1, size.equality_instances // 4)
    for i in range(n):
        d, m = (2, 4) if i % 2 == 0 else (3, 8)
        inst = rng.child("relu", i)
        base = random_instance(inst.child("model"), d, m)
        model = RandomFeatureScoreModel(theta=base.theta, W=base.W, U=torch.eye(m, dtype=F64),
                                        e=torch.full((m,), 20.0, dtype=F64), activation="relu")
        delta = scaled_delta(AdmissibleDeltaSampler(model, inst.child("delta")), model, 0.5)
        x = inst.child("x").normal((64, d), dtype=F64)
        worst = max(worst, loss_equality_check(model, delta, GaussianPrior.standard(d), x))
    return CheckResult(name="loss_equality_relu", regime="relu, all pre-activations > 0",
                       tolerance=1e-10, discrepancy=worst, passed=worst <= 1e-10, seed=rng.seed,
                       details={"instances": n})


def check_density_and_constant(rng: Rng, size: SuiteSize) -> list[CheckResult]:
    mismatch = mass_error = c_error = 0.0
    for i in range(size.density_instances):
        inst = rng.child("density", i)
        m = 4 if i % 2 == 0 else 8
        model = random_instance(inst.child("model"), 2, m)
        delta = scaled_delta(AdmissibleDeltaSampler(model, inst.child("delta")), model, 0.3, max_shift=1.0)
        result = quadrature_check(delta, model, resolution=size.quadrature_resolution)
        mismatch = max(mismatch, result.density_mismatch)
        mass_error = max(mass_error, abs(result.total_mass - 1.0))
        c_error = max(c_error, abs(result.quadrature_C - result.closed_C))
    grid = f"trapezoid [−8, 8]², {size.quadrature_resolution}² nodes"
    details = {"instances": size.density_instances, "grid": grid}
    return [
        CheckResult(name="density_identity", regime="d = 2, identity activation", tolerance=1e-6,
                    discrepancy=max(mismatch, mass_error), passed=mismatch <= 1e-6 and mass_error <= 1e-6,
                    seed=rng.seed, details={**details, "max_density_mismatch": mismatch,
                                            "max_mass_error": mass_error}),
        CheckResult(name="normalization_constant", regime="d = 2, identity activation", tolerance=1e-6,
                    discrepancy=c_error, passed=c_error <= 1e-6, seed=rng.seed, details=details),
    ]


def check_kl_monte_carlo(rng: Rng, size: SuiteSize) -> CheckResult:
    worst = 0.0
    rows = []
    for i in range(size.kl_instances):
        inst = rng.child("kl", i)
        d = (2, 3, 5)[i % 3]
        model = random_instance(inst.child("model"), d, 8)
        pg = perturbed_gaussian(scaled_delta(AdmissibleDeltaSampler(model, inst.child("delta")), model, 0.5), model)
        closed = gaussian_kl(pg)
        estimate, stderr = monte_carlo_kl(pg, size.kl_mc_samples, inst.child("mc"))
        relative = abs(estimate - closed) / closed
        worst = max(worst, relative)
        rows.append({"d": d, "closed": closed, "monte_carlo": estimate, "stderr": stderr})
    return CheckResult(name="kl_monte_carlo", regime="moderate-norm δ, identity activation", tolerance=0.02,
                       discrepancy=worst, passed=worst <= 0.02, seed=rng.seed,
                       details={"samples": size.kl_mc_samples, "instances": rows})


def check_kl_bound(rng: Rng, size: SuiteSize) -> tuple[CheckResult, list[dict], int]:
    violations: list[dict] = []
    exceedances = 0
    worst_slack = -math.inf
    for d in (2, 3, 5):
        for radius in (0.25, 0.5, 1.0):
            inst = rng.child("bound", d, radius)
            model = random_instance(inst.child("model"), d, 8)
            sampler = AdmissibleDeltaSampler(model, inst.child("delta"))
            bound = eigen_gap_bound(radius, model, sampler, size.bound_samples, strict=False)
            violations.extend(violation_record(s, model) for s in bound.violations)
            exceedances += bound.sigma_d_bound_exceedances
            worst_slack = max(worst_slack, max(s.kl_closed - s.kl_eigen_bound for s in bound.samples))
    return (
        CheckResult(name="kl_eigen_bound", regime="d ∈ {2, 3, 5}, Δ ∈ {0.25, 0.5, 1}", tolerance=1e-9,
                    discrepancy=max(worst_slack, 0.0), passed=not violations, seed=rng.seed,
                    details={"samples_per_cell": size.bound_samples, "violations": len(violations),
                             "sigma_d_form_exceedances": exceedances}),
        violations,
        exceedances,
    )


def check_bound_counterexample(rng: Rng) -> CheckResult:
    """d = m = 1, W = U = e = 1, δ = −0.5: the σ_d-coefficient form is exceeded, the certified form holds."""
    one = torch.ones((1, 1), dtype=F64)
    model = RandomFeatureScoreModel(theta=one, W=one, U=one, e=torch.ones(1, dtype=F64))
    sample = kl_bounds(torch.full((1, 1), -0.5, dtype=F64), 0.5, model)
    return CheckResult(name="kl_bound_counterexample", regime="d = m = 1, negative δWᵀ", tolerance=1e-9,
                       discrepancy=max(sample.kl_closed - sample.kl_eigen_bound, 0.0),
                       passed=not sample.violates, seed=rng.seed,
                       details={"kl_closed": sample.kl_closed, "kl_sigma_d_bound": sample.kl_sigma_d_bound,
                                "kl_eigen_bound": sample.kl_eigen_bound})


def check_mean_sign(rng: Rng, size: SuiteSize) -> CheckResult:
    """Importance-sampled mean of e^{−I}·N(0, I) must match μ_δ (and not −μ_δ)."""
    worst = 0.0
    flipped_rejected = 0
    passed = True
    for i in range(size.sign_instances):
        inst = rng.child("sign", i)
        d = (2, 3, 5)[i % 3]
        model = random_instance(inst.child("model"), d, 8)
        delta = scaled_delta(AdmissibleDeltaSampler(model, inst.child("delta")), model, 0.3, max_shift=1.0)
        mu = perturbed_gaussian(delta, model).mean
        estimate, stderr = importance_mean(delta, model, size.sign_mc_samples, inst.child("mc"))
        allowed = 3 * float(torch.linalg.vector_norm(stderr))
        miss = float(torch.linalg.vector_norm(estimate - mu))
        passed = passed and miss <= allowed
        worst = max(worst, 3 * miss / allowed)
        flipped_rejected += float(torch.linalg.vector_norm(estimate + mu)) > allowed
    return CheckResult(name="mean_sign", regime="importance sampling from N(0, I)", tolerance=3.0,
                       discrepancy=worst, passed=passed, seed=rng.seed,
                       details={"instances": size.sign_instances, "samples": size.sign_mc_samples,
                                "opposite_sign_rejected": flipped_rejected})


# ─── Suite ────────────────────────────────────────────────────────────────────

def run_certification(seed: int, quick: bool = False) -> CertificationReport:
    size = SuiteSize.quick() if quick else SuiteSize()
    rng = Rng(seed)
    checks: list[CheckResult] = []

    def timed(name, fn, *args):
        started = time.perf_counter()
        result = fn(*args)
        logger.info("%-24s done in %.1fs", name, time.perf_counter() - started)
        return result

    checks.append(timed("loss_equality", check_loss_equality, rng.child("equality"), size))
    checks.append(timed("loss_equality_relu", check_loss_equality_relu, rng.child("relu"), size))
    checks.extend(timed("density", check_density_and_constant, rng.child("density"), size))
    checks.append(timed("kl_monte_carlo", check_kl_monte_carlo, rng.child("kl"), size))
    bound_check, violations, exceedances = timed("kl_eigen_bound", check_kl_bound, rng.child("bound"), size)
    checks.append(bound_check)
    checks.append(check_bound_counterexample(rng.child("counterexample")))
    checks.append(timed("mean_sign", check_mean_sign, rng.child("sign"), size))

    for check in checks:
        level = logging.INFO if check.passed else logging.ERROR
        logger.log(level, "%-24s %s  discrepancy=%.3e  tol=%.1e",
                   check.name, "PASS" if check.passed else "FAIL", check.discrepancy, check.tolerance)
    return CertificationReport(checks=checks, violations=violations, sigma_d_bound_exceedances=exceedances)
