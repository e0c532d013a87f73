"""tests/test_certification.py — The quick certification suite and its report."""
import pytest

from core.certification import run_certification


@pytest.fixture(scope="module")
def quick_report():
    return run_certification(seed=0, quick=True)


def test_quick_suite_passes(quick_report):
    failed = [(c.name, c.discrepancy, c.tolerance) for c in quick_report.checks if not c.passed]
    assert not failed
    assert quick_report.passed
    assert not quick_report.violations


def test_every_check_is_reported(quick_report):
    names = {c.name for c in quick_report.checks}
    assert names == {
        "loss_equality", "loss_equality_relu", "density_identity", "normalization_constant",
        "kl_monte_carlo", "kl_eigen_bound", "kl_bound_counterexample", "mean_sign",
    }


def test_counterexample_exceeds_sigma_d_form_only(quick_report):
    check = next(c for c in quick_report.checks if c.name == "kl_bound_counterexample")
    assert check.details["kl_closed"] > check.details["kl_sigma_d_bound"]
    assert check.details["kl_closed"] <= check.details["kl_eigen_bound"] + 1e-9


def test_report_serialises(quick_report):
    dumped = quick_report.model_dump(mode="json")
    assert len(dumped["checks"]) == 8
    assert dumped["sigma_d_bound_exceedances"] >= 0
