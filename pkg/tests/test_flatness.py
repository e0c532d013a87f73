"""tests/test_flatness.py — LPF, perturbation curves and the 2-D loss surface."""
import math

import pytest
import torch

from core.diffusion import draw_noise, linear_schedule, noise_regression_loss
from core.errors import ConfigurationError, NumericFailureError
from core.flatness import diffusion_objective, loss_surface_grid, lpf, perturbation_curve
from core.networks import EpsModel
from core.numerics import Rng
from models.run_config import LpfEvalConfig, ModelConfig
from tests.conftest import flat, half_square


# ─── LPF ──────────────────────────────────────────────────────────────────────

def test_lpf_with_zero_sigma_is_the_loss():
    w = flat([1.0, -2.0, 0.5])
    record = lpf(half_square, w, LpfEvalConfig(sigma=0.0, samples=8), Rng(0))
    assert record.value == half_square(w).item()
    assert record.stderr == 0.0 and record.exclusions == 0


def test_lpf_of_quadratic_adds_half_sigma_squared_per_dimension():
    n, sigma = 100, 0.1
    w = flat(torch.ones(n))
    record = lpf(half_square, w, LpfEvalConfig(sigma=sigma, samples=400), Rng(1))
    expected = 0.5 * n + 0.5 * sigma ** 2 * n
    assert record.stderr > 0
    assert abs(record.value - expected) <= 5 * record.stderr
    assert record.baseline_loss == pytest.approx(0.5 * n)


def test_lpf_relative_sigma_follows_parameter_rms():
    w = flat([3.0, -3.0, 3.0, -3.0])
    record = lpf(half_square, w, LpfEvalConfig(sigma_rel=0.1, samples=2), Rng(2))
    assert record.sigma == pytest.approx(0.3)
    assert record.sigma_rule == "0.1*rms(params)"


def test_lpf_leaves_parameters_untouched():
    w = flat([1.0, 2.0])
    before = w.values.clone()
    lpf(half_square, w, LpfEvalConfig(sigma=0.5, samples=4), Rng(3))
    assert torch.equal(w.values, before)


def test_lpf_excludes_non_finite_draws():
    def half_nan(params):
        value = half_square(params)
        return value * math.nan if params.values[0] > 0 else value

    record = lpf(half_nan, flat([0.0, 0.0]), LpfEvalConfig(sigma=1.0, samples=40), Rng(4))
    assert 0 < record.exclusions < 40
    assert math.isfinite(record.value)


def test_lpf_all_draws_non_finite_raises():
    def always_nan(params):
        return params.values.sum() * math.nan

    with pytest.raises(NumericFailureError):
        lpf(always_nan, flat([1.0]), LpfEvalConfig(sigma=0.1, samples=3), Rng(5))


def test_lpf_on_diffusion_objective_matches_loss():
    sched = linear_schedule(20, 1e-4, 0.02)
    model = EpsModel.initialised(ModelConfig(hidden=(8,), embed_dim=4), Rng(6))
    draw = draw_noise(torch.randn(16, 2, generator=torch.Generator().manual_seed(0)), sched, Rng(7))
    objective = diffusion_objective(model, draw, sched)
    params = model.params()
    record = lpf(objective, params, LpfEvalConfig(sigma=0.0), Rng(8))
    with torch.no_grad():
        assert record.value == pytest.approx(float(noise_regression_loss(model, draw, sched)), rel=1e-12)


# ─── Perturbation curve ───────────────────────────────────────────────────────

def test_curve_of_quadratic_at_origin_is_half_r_squared():
    points = perturbation_curve(half_square, flat(torch.zeros(30)), [0.0, 1.0, 2.0], k=4, rng=Rng(9))
    assert [p.radius for p in points] == [0.0, 1.0, 2.0]
    assert [p.mean_loss for p in points] == pytest.approx([0.0, 0.5, 2.0], abs=1e-12)
    assert all(p.std_loss == pytest.approx(0.0, abs=1e-12) for p in points)


def test_curve_radius_zero_is_exact_loss():
    w = flat([0.7, -0.2])
    points = perturbation_curve(half_square, w, [0.0], k=3, rng=Rng(10))
    assert points[0].mean_loss == half_square(w).item()


@pytest.mark.parametrize("radii", [[1.0, 0.5], [0.0, 0.0]])
def test_curve_radii_must_increase(radii):
    with pytest.raises(ConfigurationError):
        perturbation_curve(half_square, flat([1.0]), radii, k=2, rng=Rng(0))


def test_curve_needs_a_direction():
    with pytest.raises(ConfigurationError):
        perturbation_curve(half_square, flat([1.0]), [0.0, 1.0], k=0, rng=Rng(0))


# ─── Surface ──────────────────────────────────────────────────────────────────

def test_surface_of_quadratic_is_half_a2_plus_b2():
    grid = loss_surface_grid(half_square, flat(torch.zeros(10)), extent=1.0, resolution=3, rng=Rng(11))
    assert grid.coords == [-1.0, 0.0, 1.0]
    assert len(grid.direction_seeds) == 2
    for i, a in enumerate(grid.coords):
        for j, b in enumerate(grid.coords):
            assert grid.losses[i][j] == pytest.approx(0.5 * (a * a + b * b), abs=1e-12)


def test_surface_centre_is_the_loss():
    w = flat([0.4, -1.0, 2.0])
    grid = loss_surface_grid(half_square, w, extent=0.5, resolution=5, rng=Rng(12))
    assert grid.losses[2][2] == half_square(w).item()


def test_surface_errors():
    with pytest.raises(ConfigurationError):
        loss_surface_grid(half_square, flat([1.0, 2.0]), extent=1.0, resolution=1, rng=Rng(0))
    with pytest.raises(ConfigurationError):
        loss_surface_grid(half_square, flat([1.0]), extent=1.0, resolution=3, rng=Rng(0))


def test_surface_counts_non_finite_points():
    w = flat([0.4, -1.0, 2.0])

    def nan_at_centre(p):
        if torch.equal(p.values, w.values):
            return torch.tensor(float("nan"), dtype=torch.float64)
        return half_square(p)

    grid = loss_surface_grid(nan_at_centre, w, extent=0.5, resolution=3, rng=Rng(13))
    assert grid.exclusions == 1
    assert math.isnan(grid.losses[1][1])
    assert sum(math.isfinite(v) for row in grid.losses for v in row) == 8


def test_all_non_finite_surface_raises():
    with pytest.raises(NumericFailureError):
        loss_surface_grid(lambda p: p.values.sum() * float("inf"), flat([1.0, 2.0]),
                          extent=0.5, resolution=2, rng=Rng(14))
