"""tests/test_robustness.py — Quantization, sample distances, exposure profile, latent attack and the sweep."""
import math

import pytest
import torch

from core.diffusion import RespacingMap, linear_schedule, scaled_linear_schedule, analytic_gaussian_eps
from core.errors import ConfigurationError
from core.networks import EpsModel
from core.numerics import ParamVector, Rng, Segment
from core.robustness import (
    QuantSpec,
    distance,
    exposure_profile,
    latent_attack,
    latent_objective,
    mmd_rbf,
    quantize,
    quantize_codes,
    robustness_sweep,
    sliced_w2,
)
from models.run_config import DistanceConfig, DistanceKind, ModelConfig
from tests.conftest import flat


# ─── Quantization ─────────────────────────────────────────────────────────────

def test_quantize_hand_example():
    codes, m = quantize_codes(torch.tensor([-1.0, 0.0, 0.5]), QuantSpec(8))
    assert codes.tolist() == [-127.0, 0.0, 64.0] and m == 1.0
    out = quantize(flat([-1.0, 0.0, 0.5]), QuantSpec(8))
    assert out.values.tolist() == pytest.approx([-1.0, 0.0, 64 / 127])


def test_rounding_is_half_away_from_zero():
    # 0.5 / (1/3) = 1.5 and −1.5 round away from zero at 3 bits (qmax = 3)
    codes, _ = quantize_codes(torch.tensor([1.0, 0.5, -0.5]), QuantSpec(3))
    assert codes.tolist() == [3.0, 2.0, -2.0]


@pytest.mark.parametrize("bits", [8, 4, 2])
def test_quantize_is_idempotent(bits):
    rng = Rng(bits)
    for i in range(1000):
        w = flat(rng.child("w", i).normal((257,)), dtype=torch.float32)
        once = quantize(w, QuantSpec(bits))
        assert torch.equal(quantize(once, QuantSpec(bits)).values, once.values), i


@pytest.mark.parametrize("bits", [8, 4])
def test_quantize_error_is_at_most_half_a_step(bits):
    rng = Rng(100 + bits)
    spec = QuantSpec(bits)
    for i in range(1000):
        w = flat(rng.child("w", i).normal((500,), dtype=torch.float64))
        step = float(w.values.abs().max()) / spec.qmax
        err = (quantize(w, spec).values - w.values).abs().max()
        assert float(err) <= step / 2 + 1e-12, i


def test_quantize_is_per_segment_and_keeps_zero_segments():
    segments = [Segment("a", (2,), 0), Segment("b", (3,), 2)]
    w = ParamVector(segments, torch.tensor([0.0, 0.0, 10.0, -5.0, 1.0], dtype=torch.float64))
    out = quantize(w, QuantSpec(4))
    assert out.segment("a").tolist() == [0.0, 0.0]
    assert float(out.segment("b")[0]) == 10.0
    assert out.segments == w.segments


def test_thirty_two_bits_is_identity_copy():
    w = flat([0.123, -4.56], dtype=torch.float32)
    out = quantize(w, QuantSpec(32))
    assert torch.equal(out.values, w.values)
    assert out.values.data_ptr() != w.values.data_ptr()


def test_one_bit_is_rejected():
    with pytest.raises(ConfigurationError):
        QuantSpec(1)


# ─── Distances ────────────────────────────────────────────────────────────────

def test_sliced_w2_of_identical_sets_is_zero():
    a = Rng(0).normal((300, 2))
    assert sliced_w2(a, a.clone(), 32, Rng(1)) == 0.0


def test_sliced_w2_of_one_dimensional_shift():
    a = Rng(2).normal((400, 1), dtype=torch.float64)
    assert sliced_w2(a, a + 1.0, 8, Rng(3)) == pytest.approx(1.0, rel=1e-9)


def test_sliced_w2_is_symmetric_with_unequal_sizes():
    a, b = Rng(4).normal((120, 2)), Rng(5).normal((77, 2)) + 0.3
    assert sliced_w2(a, b, 16, Rng(6)) == pytest.approx(sliced_w2(b, a, 16, Rng(6)), rel=1e-12)


def test_mmd_separates_shifted_sets():
    a = Rng(7).normal((200, 2), dtype=torch.float64)
    assert mmd_rbf(a, a.clone()) < 1e-6
    assert mmd_rbf(a, a + 3.0) > 0.1


@pytest.mark.parametrize("kind", list(DistanceKind))
def test_distance_report(kind):
    a, b = Rng(8).normal((50, 2)), Rng(9).normal((60, 2))
    report = distance(a, b, DistanceConfig(kind=kind, projections=8), Rng(10))
    assert report.kind == kind.value
    assert (report.n_a, report.n_b, report.seed) == (50, 60, 10)
    assert report.value >= 0


def test_distance_rejects_empty_or_mismatched_sets():
    with pytest.raises(ConfigurationError):
        sliced_w2(torch.zeros(0, 2), torch.zeros(5, 2), 4, Rng(0))
    with pytest.raises(ConfigurationError):
        mmd_rbf(torch.zeros(5, 2), torch.zeros(5, 3))


# ─── Exposure bias ────────────────────────────────────────────────────────────

def test_exposure_profile_shape_and_oracle_gap():
    sched = scaled_linear_schedule(100)
    data = Rng(11).normal((1000, 2))
    profile = exposure_profile(analytic_gaussian_eps(1.0, sched), data, sched,
                               RespacingMap.resolve("full", sched.T), Rng(12))
    assert profile.step_index == list(range(100))
    assert profile.timestep == list(range(100, 0, -1))
    assert len(profile.reference_sq_norm) == len(profile.sampling_sq_norm) == 100
    assert profile.gap <= 4 * profile.gap_stderr


def test_exposure_needs_data():
    sched = linear_schedule(10, 1e-4, 0.02)
    with pytest.raises(ConfigurationError):
        exposure_profile(analytic_gaussian_eps(1.0, sched), torch.zeros(0, 2), sched,
                         RespacingMap.identity(10), Rng(0))


# ─── Latent attack ────────────────────────────────────────────────────────────

def _tiny_predictor():
    model = EpsModel.initialised(ModelConfig(hidden=(16,), embed_dim=4), Rng(13), dtype=torch.float64)
    return model


def test_attack_increases_objective_within_budget():
    sched = linear_schedule(20, 1e-4, 0.02)
    model = _tiny_predictor()
    z = Rng(14).normal((64, 2), dtype=torch.float64)
    attacked = latent_attack(model, sched, z, strength=0.01, steps=2)
    budget = 0.01 * math.sqrt(2)
    assert float(torch.linalg.vector_norm(attacked - z, dim=1).max()) <= budget + 1e-12
    with torch.no_grad():
        assert float(latent_objective(model, attacked, 20).sum()) >= float(latent_objective(model, z, 20).sum())


def test_attack_with_zero_strength_is_identity():
    sched = linear_schedule(20, 1e-4, 0.02)
    z = Rng(15).normal((8, 2))
    assert torch.equal(latent_attack(_tiny_predictor(), sched, z, strength=0.0, steps=3), z)


def test_attack_argument_errors():
    sched = linear_schedule(20, 1e-4, 0.02)
    z = Rng(16).normal((4, 2))
    with pytest.raises(ConfigurationError):
        latent_attack(_tiny_predictor(), sched, z, strength=0.1, steps=0)
    with pytest.raises(ConfigurationError):
        latent_attack(_tiny_predictor(), sched, z, strength=-0.1, steps=1)


# ─── Sweep ────────────────────────────────────────────────────────────────────

def _sweep(bits, respacings):
    sched = linear_schedule(20, 1e-4, 0.02)
    model = EpsModel.initialised(ModelConfig(hidden=(8,), embed_dim=4), Rng(17))
    target = Rng(18).normal((32, 2))
    return robustness_sweep(model, {"final": model.params()}, bits, respacings, sched, target,
                            n=32, cfg=DistanceConfig(projections=8), rng=Rng(19))


def test_sweep_row_per_cell_with_fp32_delta_zero():
    rows = _sweep((32, 8, 4), (5, "full"))
    assert len(rows) == 6
    assert [(r.bits, r.respacing) for r in rows] == [
        (32, "5"), (32, "full"), (8, "5"), (8, "full"), (4, "5"), (4, "full"),
    ]
    assert all(r.status == "ok" for r in rows)
    assert all(r.delta_vs_fp32 == 0.0 for r in rows if r.bits == 32)


def test_sweep_reports_failed_cells_and_continues():
    rows = _sweep((32, 1), (5,))
    by_bits = {r.bits: r for r in rows}
    assert by_bits[32].status == "ok"
    assert by_bits[1].status == "failed" and by_bits[1].value is None and by_bits[1].error
