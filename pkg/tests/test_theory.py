import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from xgranchunk.errors import NotUnitNorm
from xgranchunk.theory import (
    GeometryConfig, empirical_check, expected_bound, measure_point, monte_carlo_verify,
    sample_configuration, sample_configurations, substitution_loss, verify_grid, worst_case_bound,
)

GRID = (0, 0.25, 0.5, 0.75, 0.9, 0.99)


def test_substitution_loss_examples():
    e = np.array([1.0, 0, 0])
    assert substitution_loss(e, e, e) == 0
    assert substitution_loss(e, e, np.array([0, 1.0, 0])) == 1
    assert substitution_loss(e, e, np.array([0.6, 0.8, 0])) == pytest.approx(0.4, abs=1e-12)
    with pytest.raises(NotUnitNorm):
        substitution_loss(e, e, np.array([0.6, 0.6, 0]))


def test_bound_examples():
    assert worst_case_bound(1, 0.9) == pytest.approx(0.1)
    assert worst_case_bound(0, 0) == 1.0
    assert worst_case_bound(0.8, 0.95) == pytest.approx(0.8 * 0.05 + 0.6 * math.sqrt(0.0975), abs=1e-12)
    assert worst_case_bound(0.8, 0.95) == pytest.approx(0.22735, abs=1e-5)
    # 2/pi ~ 0.636 is the stated coefficient
    assert expected_bound(0, 0) == pytest.approx(0.63662, abs=1e-5)
    assert round(expected_bound(0, 0), 3) == 0.637 and abs(expected_bound(0, 0) - 0.636) < 1e-3
    for rho in (-0.3, 0, 0.4, 1):
        assert expected_bound(1, rho) == pytest.approx(1 - rho)
    assert expected_bound(0.5, 0.5) == pytest.approx(0.72746, abs=1e-5)


@given(st.floats(0, 1), st.floats(0, 1))
def test_expected_below_worst(s, rho):
    assert expected_bound(s, rho) <= worst_case_bound(s, rho) + 1e-15


def test_config_validation():
    with pytest.raises(ValueError):
        GeometryConfig(s=1.1, rho=0)
    with pytest.raises(ValueError):
        GeometryConfig(s=0, rho=0, d=2)


def test_sample_configuration_constraints(rng):
    q, e, v = sample_configuration(GeometryConfig(s=1, rho=1), rng)
    np.testing.assert_allclose(q, e, atol=1e-9)
    np.testing.assert_allclose(v, e, atol=1e-9)
    for d in (3, 7):
        cfg = GeometryConfig(s=0.3, rho=-0.6, d=d)
        c = sample_configurations(cfg, rng, trials=1000)
        for x in (c.q, c.e, c.v):
            np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1, atol=1e-12)
        assert np.abs(np.einsum("ij,ij->i", c.q, c.e) - 0.3).max() < 1e-9
        assert np.abs(np.einsum("ij,ij->i", c.e, c.v) + 0.6).max() < 1e-9


def test_identity_from_measured_azimuth(rng):
    # recover phi from the vectors themselves, not from the sampler's record
    cfg = GeometryConfig(s=0.4, rho=0.7, d=5)
    c = sample_configurations(cfg, rng, trials=500)
    for q, e, v, phi in zip(c.q, c.e, c.v, c.phi):
        pt = measure_point(q, e, v)
        assert abs(pt.cos_phi - math.cos(phi)) < 1e-9
        sa, sb = math.sqrt(1 - pt.s ** 2), math.sqrt(1 - pt.rho ** 2)
        assert abs(float(q @ v) - (pt.s * pt.rho + sa * sb * pt.cos_phi)) < 1e-9


def test_monte_carlo_trivial_cell():
    r = monte_carlo_verify(GeometryConfig(s=1, rho=1, trials=500))
    assert r.max_loss < 1e-12 and r.worst_case_bound == 0 and r.expected_bound == 0
    assert r.violations == 0


def test_monte_carlo_report_consistency():
    r = monte_carlo_verify(GeometryConfig(s=0.5, rho=0.5, trials=25_000, seed=3))
    assert r.trials == 25_000
    assert r.mean_loss <= r.max_loss <= r.worst_case_bound + 1e-9
    assert r.violations == 0 and r.expected_ok
    assert r.max_identity_error < 1e-9
    row = r.as_row()
    assert row["violations"] == 0 and row["trials"] == 25_000


def test_workers_do_not_change_result():
    cfg = GeometryConfig(s=0.25, rho=0.9, trials=23_456, seed=11)
    a = monte_carlo_verify(cfg, workers=1)
    b = monte_carlo_verify(cfg, workers=3)
    assert a.as_row() == b.as_row()


def test_mean_abs_cos_phi_near_two_over_pi():
    r = monte_carlo_verify(GeometryConfig(s=0, rho=0, trials=100_000, seed=0))
    assert 0.6266 <= r.mean_abs_cos_phi <= 0.6466


def test_grid_small_has_no_violations():
    reports = verify_grid(GRID, trials=2000, seed=7)
    assert len(reports) == 36
    assert sum(r.violations for r in reports) == 0
    assert all(r.expected_ok for r in reports)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.9])
@pytest.mark.parametrize("rho", [0.25, 0.5, 0.9])
def test_adversarial_azimuth_is_tight(s, rho):
    r = monte_carlo_verify(GeometryConfig(s=s, rho=rho, trials=200, seed=1), phi=math.pi)
    assert abs(r.max_loss - worst_case_bound(s, rho)) < 1e-6
    assert abs(r.mean_loss - worst_case_bound(s, rho)) < 1e-6


@given(st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 1000))
def test_negative_cosines_still_bounded(s, rho, seed):
    # the worst-case bound as written assumes s >= 0; for negative s the
    # same geometry bounds |s|(1-rho) + sin a sin b
    rng = np.random.default_rng(seed)
    c = sample_configurations(GeometryConfig(s=s, rho=rho), rng, trials=50)
    eps = np.abs(np.einsum("ij,ij->i", c.q, c.e) - np.einsum("ij,ij->i", c.q, c.v))
    bound = abs(s) * (1 - rho) + math.sqrt(max(0, 1 - s * s)) * math.sqrt(max(0, 1 - rho * rho))
    assert (eps <= bound + 1e-9).all()


def test_empirical_check_on_random_vectors(rng):
    teacher = rng.standard_normal((5, 8))
    approx = teacher + 0.1 * rng.standard_normal((5, 8))
    queries = rng.standard_normal((7, 8))
    rep = empirical_check(teacher, approx, queries)
    assert len(rep.points) == 35
    assert rep.violations == 0
    assert rep.mean_loss <= max(p.worst_case_bound for p in rep.points)
    assert 0 <= rep.mean_abs_cos_phi <= 1
