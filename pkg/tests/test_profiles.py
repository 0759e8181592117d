import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtspec.profiles import ALL_CRITICAL, Grid1D, make_profile, validate_assumptions, critical_points

STANDARD = Grid1D(20.0, 801)


def test_p1_values():
    s = make_profile("P1")
    assert s.U(0.0) == 0.0
    assert s.rho(0.0) == 2.0
    assert s.drho(0.0) == 1.0
    assert s.shear_free


def test_p2_shear_positive():
    s = make_profile("P2")
    assert s.dU(0.0) == 1.0
    assert np.all(s.dU(np.linspace(-30, 30, 2001)) > 0.0)


def test_p3_derivatives():
    # U = tanh^2: U' = 2 tanh sech^2, U'' = 2 sech^4 - 4 tanh^2 sech^2
    s = make_profile("P3")
    assert s.dU(0.0) == 0.0
    assert s.d2U(0.0) == pytest.approx(2.0, abs=1e-15)
    y = np.linspace(-3, 3, 13)
    t, sech2 = np.tanh(y), 1.0 / np.cosh(y) ** 2
    np.testing.assert_allclose(s.dU(y), 2 * t * sech2, atol=1e-15)
    np.testing.assert_allclose(s.d2U(y), 2 * sech2**2 - 4 * t**2 * sech2, atol=1e-14)


def test_limits_and_far_field():
    s = make_profile("P1")
    assert s.rho_plus == 3.0 and s.rho_minus == 1.0
    assert s.rho(1e4) == 3.0 and s.rho(-1e4) == 1.0
    # sech^2 underflows gracefully instead of overflowing cosh
    assert s.drho(800.0) == 0.0 and np.isfinite(s.d2rho(-800.0))


def test_make_profile_errors():
    with pytest.raises(ValueError, match="unknown profile family"):
        make_profile("P9")
    with pytest.raises(ValueError, match="width"):
        make_profile("P1", [2.0, 1.0, 0.0])
    with pytest.raises(ValueError, match="non-negative"):
        make_profile("P1", [1.0, 2.0, 1.0])
    with pytest.raises(ValueError, match="takes"):
        make_profile("P2", [1.0])
    with pytest.raises(ValueError, match="gravity"):
        make_profile("P1", g=-1.0)


def test_grid():
    g = Grid1D(20.0, 801)
    assert g.h == pytest.approx(0.05)
    assert g.x[0] == -20.0 and g.x[-1] == 20.0
    assert np.all(np.diff(g.x) > 0)
    np.testing.assert_allclose(np.diff(g.x), g.h, rtol=1e-12)
    assert g.refined().n == 1601
    with pytest.raises(ValueError):
        Grid1D(1.0, 2)
    with pytest.raises(ValueError):
        Grid1D(-1.0, 10)


def test_validate_standard_passes():
    rep = validate_assumptions(make_profile("P1"), STANDARD, 1e-6)
    assert rep.passed
    assert rep["decay_drho"].worst_value < 1e-15


def test_validate_short_domain_fails_decay():
    rep = validate_assumptions(make_profile("P1"), Grid1D(2.0, 81), 1e-6)
    assert not rep.passed
    assert not rep["decay_drho"].passed
    assert rep["decay_drho"].worst_value == pytest.approx(1.0 / math.cosh(2.0) ** 2, rel=1e-12)
    assert abs(rep["decay_drho"].worst_x2) == 2.0
    assert rep["rho_positive"].passed


def test_validate_vacuum_fails_positivity():
    s = make_profile("P1", [1.0, 1.0, 1.0])
    rep = validate_assumptions(s, STANDARD, 1e-6)
    assert not rep["rho_positive"].passed
    assert rep["rho_positive"].worst_value == 0.0


def test_validate_needs_positive_tol():
    with pytest.raises(ValueError):
        validate_assumptions(make_profile("P1"), STANDARD, 0.0)


def test_critical_points_families():
    assert critical_points(make_profile("P1"), STANDARD) is ALL_CRITICAL
    assert critical_points(make_profile("P2"), STANDARD) == []
    pts = critical_points(make_profile("P3"), STANDARD)
    assert len(pts) == 1
    assert abs(pts[0][0]) < 1e-12
    assert pts[0][1] == pytest.approx(1.0, abs=1e-12)


def test_critical_points_off_node_and_refinement():
    # even n puts the zero of P3 between nodes
    s = make_profile("P3")
    for n in (400, 799):
        g = Grid1D(20.0, n)
        a = critical_points(s, g)
        b = critical_points(s, g.refined())
        assert len(a) == len(b) == 1
        assert abs(float(s.dU(a[0][0]))) < 1e-12
        assert abs(a[0][0] - b[0][0]) < g.h


@pytest.mark.parametrize("family", ["P1", "P2", "P3"])
@pytest.mark.parametrize("name", ["U", "rho", "dU", "drho"])
def test_finite_difference_consistency(family, name):
    s = make_profile(family)
    f = getattr(s, name)
    df = getattr(s, {"U": "dU", "rho": "drho", "dU": "d2U", "drho": "d2rho"}[name])
    y = np.linspace(-8, 8, 161)
    errs = []
    for h in (0.02, 0.01):
        fd = (f(y + h) - f(y - h)) / (2 * h)
        errs.append(np.max(np.abs(fd - df(y))))
    # second order: halving h divides the error by four, and the constant is bounded
    assert errs[1] <= 0.3 * errs[0]
    assert errs[0] <= 4.0 * 0.02**2


@settings(max_examples=40, deadline=None)
@given(mean=st.floats(1.2, 5.0), jump=st.floats(-1.0, 1.0), width=st.floats(0.3, 3.0),
       y=st.floats(-50, 50))
def test_density_positive_and_bounded(mean, jump, width, y):
    s = make_profile("P2", [mean, jump, width])
    r = float(s.rho(y))
    assert r > 0.0
    assert min(s.rho_minus, s.rho_plus) - 1e-12 <= r <= max(s.rho_minus, s.rho_plus) + 1e-12
