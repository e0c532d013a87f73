"""tests/test_theory.py — Random-feature identities, perturbed Gaussians, KL bounds and their oracles."""
import math

import pytest
import torch

from core.errors import ConfigurationError, InvariantViolationError, RegimeError
from core.numerics import Rng
from core.theory import (
    AdmissibleDeltaSampler,
    GaussianPrior,
    RandomFeatureScoreModel,
    eigen_gap_bound,
    exponent_gradient,
    fit_least_squares,
    gaussian_kl,
    importance_mean,
    kl_bounds,
    loss_equality_check,
    monte_carlo_kl,
    normalization_constant,
    perturbation_exponent,
    perturbed_gaussian,
    perturbed_set_probe,
    probe_loss_variation,
    quadrature_check,
    random_instance,
    score_loss,
)

F64 = torch.float64


def t(values):
    return torch.tensor(values, dtype=F64)


def scalar_model() -> RandomFeatureScoreModel:
    return RandomFeatureScoreModel(theta=t([[1.0]]), W=t([[1.0]]), U=t([[1.5]]), e=t([1.0]))


def diagonal_model() -> tuple[RandomFeatureScoreModel, torch.Tensor]:
    model = RandomFeatureScoreModel(theta=torch.zeros(2, 2, dtype=F64), W=torch.eye(2, dtype=F64),
                                    U=t([[3.0, 0.0], [0.0, 2.0]]), e=t([1.0, 1.0]))
    return model, t([[0.2, 0.0], [0.0, 0.4]])


# ─── Exponent and closed forms ────────────────────────────────────────────────

def test_exponent_hand_example():
    value = perturbation_exponent(t([[1.0]]), t([[0.2]]), scalar_model())
    assert value.tolist() == pytest.approx([0.4])


def test_exponent_adds_constant():
    value = perturbation_exponent(t([[1.0]]), t([[0.2]]), scalar_model(), C=-0.1)
    assert value.tolist() == pytest.approx([0.3])


def test_diagonal_perturbed_gaussian():
    model, delta = diagonal_model()
    pg = perturbed_gaussian(delta, model)
    assert torch.diagonal(pg.cov).tolist() == pytest.approx([1 / 1.1, 1 / 1.2])
    assert pg.mean.tolist() == pytest.approx([-0.3 / 1.1, -0.4 / 1.2])
    assert gaussian_kl(pg) == pytest.approx(0.1187599, abs=1e-6)


def test_diagonal_normalization_constant():
    model, delta = diagonal_model()
    expected = (0.36 / 1.1 + 0.64 / 1.2) / 8 + 0.5 * math.log(1 / (1.1 * 1.2))
    assert normalization_constant(delta, model) == pytest.approx(expected, rel=1e-12)


def test_zero_delta_gives_standard_normal():
    model = random_instance(Rng(0), 3, 8)
    pg = perturbed_gaussian(torch.zeros(3, 8, dtype=F64), model)
    assert torch.allclose(pg.cov, torch.eye(3, dtype=F64))
    assert torch.count_nonzero(pg.mean) == 0
    assert gaussian_kl(pg) == pytest.approx(0.0, abs=1e-14)


# ─── Regime errors ────────────────────────────────────────────────────────────

def test_asymmetric_delta_w_is_out_of_regime():
    model = random_instance(Rng(1), 2, 3)
    with pytest.raises(RegimeError):
        perturbed_gaussian(Rng(2).normal((2, 3), dtype=F64), model)


def test_non_positive_definite_precision_is_out_of_regime():
    model = RandomFeatureScoreModel(theta=t([[1.0]]), W=t([[1.0]]), U=t([[1.0]]), e=t([1.0]))
    with pytest.raises(RegimeError):
        perturbed_gaussian(t([[-2.0]]), model)


def test_relu_with_non_positive_preactivation_is_out_of_regime():
    base = random_instance(Rng(3), 2, 4)
    model = RandomFeatureScoreModel(theta=base.theta, W=base.W, U=torch.eye(4, dtype=F64),
                                    e=torch.full((4,), -20.0, dtype=F64), activation="relu")
    with pytest.raises(RegimeError):
        loss_equality_check(model, torch.zeros(2, 4, dtype=F64), GaussianPrior.standard(2),
                            Rng(4).normal((8, 2), dtype=F64))


def test_wrong_delta_shape_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        perturbed_gaussian(torch.zeros(2, 2, dtype=F64), random_instance(Rng(5), 2, 3))


# ─── Loss equality and oracles ────────────────────────────────────────────────

@pytest.mark.parametrize("d,m", [(2, 4), (3, 8), (5, 8)])
def test_perturbed_parameters_equal_perturbed_prior(d, m):
    model = random_instance(Rng(10 + d), d, m)
    delta = AdmissibleDeltaSampler(model, Rng(20 + d)).sample(0.5)
    x = Rng(30 + d).normal((64, d), dtype=F64)
    assert loss_equality_check(model, delta, GaussianPrior.standard(d), x) <= 1e-9


def test_quadrature_matches_closed_form():
    model, delta = diagonal_model()
    result = quadrature_check(delta, model, resolution=300)
    assert result.density_mismatch <= 1e-6
    assert result.total_mass == pytest.approx(1.0, abs=1e-6)
    assert result.quadrature_C == pytest.approx(result.closed_C, abs=1e-6)


def test_quadrature_limited_to_three_dimensions():
    model = random_instance(Rng(6), 4, 8)
    with pytest.raises(ConfigurationError):
        quadrature_check(torch.zeros(4, 8, dtype=F64), model)


def test_monte_carlo_kl_agrees_with_closed_form():
    model, delta = diagonal_model()
    pg = perturbed_gaussian(delta, model)
    estimate, stderr = monte_carlo_kl(pg, 200_000, Rng(7))
    assert abs(estimate - gaussian_kl(pg)) <= 4 * stderr


def test_importance_mean_has_the_closed_form_sign():
    model, delta = diagonal_model()
    mu = perturbed_gaussian(delta, model).mean
    estimate, stderr = importance_mean(delta, model, 200_000, Rng(8))
    assert bool(((estimate - mu).abs() <= 4 * stderr).all())
    assert bool(((estimate + mu).abs() > 4 * stderr).all())


# ─── Admissible sampler ───────────────────────────────────────────────────────

def test_sampler_draws_symmetric_delta_w_within_radius():
    model = random_instance(Rng(9), 3, 8)
    sampler = AdmissibleDeltaSampler(model, Rng(10))
    for _ in range(20):
        delta = sampler.sample(0.5)
        delta_w = delta @ model.W.T
        assert torch.allclose(delta_w, delta_w.T, atol=1e-12)
        assert float(torch.linalg.matrix_norm(delta)) <= 0.5 + 1e-12
    fixed = sampler.sample(0.7, fixed_norm=True)
    assert float(torch.linalg.matrix_norm(fixed)) == pytest.approx(0.7)
    assert torch.count_nonzero(sampler.sample(0.0)) == 0


def test_sampler_needs_full_rank_features():
    W = torch.zeros(2, 4, dtype=F64)
    model = RandomFeatureScoreModel(theta=W, W=W, U=torch.ones(2, 4, dtype=F64), e=t([1.0, 1.0]))
    with pytest.raises(ConfigurationError):
        AdmissibleDeltaSampler(model, Rng(0))


# ─── Perturbed-prior set ──────────────────────────────────────────────────────

def test_zero_radius_set_is_the_standard_normal():
    model = random_instance(Rng(40), 2, 4)
    members = perturbed_set_probe(model, 0.0, 5, AdmissibleDeltaSampler(model, Rng(41)))
    assert len(members) == 1
    assert torch.equal(members[0].mean, torch.zeros(2, dtype=F64))
    assert torch.allclose(members[0].cov, torch.eye(2, dtype=F64))


def test_set_members_pass_density_oracle_and_bound():
    model = random_instance(Rng(42), 2, 4)
    members = perturbed_set_probe(model, 0.3, 4, AdmissibleDeltaSampler(model, Rng(43)))
    assert len(members) == 4
    for pg in members:
        assert float(torch.linalg.matrix_norm(pg.delta)) <= 0.3 + 1e-12
        result = quadrature_check(pg.delta, model, resolution=300)
        assert result.density_mismatch <= 1e-6
        assert gaussian_kl(pg) <= kl_bounds(pg.delta, 0.3, model).kl_eigen_bound + 1e-9


def test_empty_set_is_rejected():
    model = random_instance(Rng(44), 2, 4)
    with pytest.raises(ConfigurationError):
        perturbed_set_probe(model, 0.3, 0, AdmissibleDeltaSampler(model, Rng(45)))


# ─── KL bounds ────────────────────────────────────────────────────────────────

def test_one_dimensional_counterexample():
    model = RandomFeatureScoreModel(theta=t([[1.0]]), W=t([[1.0]]), U=t([[1.0]]), e=t([1.0]))
    sample = kl_bounds(t([[-0.5]]), 0.5, model)
    assert sample.kl_closed == pytest.approx(0.5 * math.log(2), rel=1e-12)
    assert sample.kl_sigma_d_bound == pytest.approx(0.159, abs=1e-3)
    assert sample.exceeds_sigma_d_bound
    assert sample.kl_eigen_bound == pytest.approx(sample.kl_closed, rel=1e-12)
    assert not sample.violates


@pytest.mark.parametrize("radius", [0.25, 1.0])
def test_eigen_bound_holds_for_admissible_deltas(radius):
    model = random_instance(Rng(11), 3, 8)
    bound = eigen_gap_bound(radius, model, AdmissibleDeltaSampler(model, Rng(12)), 50)
    assert len(bound.samples) == 50
    assert not bound.violations
    assert bound.kl_closed <= bound.kl_eigen_bound + 1e-9


def test_zero_radius_bound_is_zero():
    model = random_instance(Rng(13), 2, 4)
    bound = eigen_gap_bound(0.0, model, AdmissibleDeltaSampler(model, Rng(14)), 10)
    assert len(bound.samples) == 1
    assert bound.kl_closed == pytest.approx(0.0, abs=1e-14)
    assert bound.kl_eigen_bound == pytest.approx(0.0, abs=1e-14)


def test_strict_bound_raises_with_the_offending_delta(monkeypatch):
    import core.theory as theory

    model = random_instance(Rng(15), 2, 4)
    monkeypatch.setattr(theory, "BOUND_SLACK", -1.0)
    with pytest.raises(InvariantViolationError) as info:
        eigen_gap_bound(0.5, model, AdmissibleDeltaSampler(model, Rng(16)), 3)
    assert set(info.value.record) >= {"delta", "W", "U", "e", "m", "kl_closed", "kl_eigen_bound"}


# ─── Flat-minimum probe ───────────────────────────────────────────────────────

def test_least_squares_fit_is_exact_for_linear_scores():
    base = random_instance(Rng(17), 3, 8)
    prior = GaussianPrior.standard(3)
    x = Rng(18).normal((200, 3), dtype=F64)
    model = fit_least_squares(base.W, base.U, base.e, prior, x)
    assert float(score_loss(model, x, prior.grad_log_density).mean()) < 1e-10


def test_loss_variation_grows_outside_the_ball():
    base = random_instance(Rng(19), 3, 8)
    prior = GaussianPrior.standard(3)
    x = Rng(20).normal((200, 3), dtype=F64)
    model = fit_least_squares(base.W, base.U, base.e, prior, x)
    variation = probe_loss_variation(model, x, 0.25, 10, AdmissibleDeltaSampler(model, Rng(21)))
    assert len(variation.inside) == len(variation.outside) == 10
    assert sum(variation.outside) / 10 > sum(variation.inside) / 10


# ─── Score loss and exponent gradient ─────────────────────────────────────────

def test_zero_theta_score_loss_is_squared_norm():
    base = random_instance(Rng(22), 3, 8)
    model = RandomFeatureScoreModel(theta=torch.zeros(3, 8, dtype=F64), W=base.W, U=base.U, e=base.e)
    x = Rng(23).normal((50, 3), dtype=F64)
    loss = score_loss(model, x, GaussianPrior.standard(3).grad_log_density)
    assert torch.allclose(loss, x.pow(2).sum(dim=1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("d,m", [(1, 1), (2, 4), (3, 8)])
def test_exponent_gradient_matches_finite_differences(d, m):
    model = random_instance(Rng(50 + d), d, m)
    delta = AdmissibleDeltaSampler(model, Rng(60 + d)).sample(0.5)
    x = Rng(70 + d).normal((16, d), dtype=F64)
    h = 1e-4
    numeric = torch.empty_like(x)
    for k in range(d):
        shift = torch.zeros_like(x)
        shift[:, k] = h
        upper = perturbation_exponent(x + shift, delta, model)
        lower = perturbation_exponent(x - shift, delta, model)
        numeric[:, k] = (upper - lower) / (2 * h)
    assert torch.allclose(exponent_gradient(x, delta, model), numeric, rtol=0, atol=1e-6)
