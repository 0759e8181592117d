import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rtspec.evolution import (
    EvolutionError, ModeOperator, ModeState, default_dt, eigenmode_state, evolve, growth_rate, random_state,
    recover_pressure, rhs, wavepacket_run,
)
from rtspec.profiles import Grid1D, make_profile
from rtspec.rayleigh import solve_hydrostatic

P1, P2 = make_profile("P1"), make_profile("P2")
STABLE = make_profile("P1", [2.0, -1.0, 1.0])
GRID = Grid1D(20.0, 801)


def zero_state(k, grid):
    return ModeState(k, 0.0, np.zeros(grid.n - 1, complex), np.zeros(grid.n, complex), np.zeros(grid.n, complex))


def relative_divergence(report):
    return float(np.max(report.div_residual / np.exp(report.log_norm)))


# ----------------------------------------------------------------------------- pressure
def test_pressure_of_zero_state_is_zero():
    assert not np.any(recover_pressure(zero_state(2, GRID), P2, GRID))


@pytest.mark.parametrize("k", [1, 3, 16])
def test_pressure_manufactured_solution(k):
    op = ModeOperator(P2, GRID, k)
    y = GRID.xmid
    q_star = np.exp(1j * y) / np.cosh(y)
    q = op.solve_E(op.apply_E(q_star))
    assert np.max(np.abs(q - q_star)) <= 1e-12 * np.max(np.abs(q_star))


def test_pressure_real_for_real_even_density():
    y = GRID.x
    st_ = zero_state(1, GRID)
    st_.r = np.exp(-(y**2)).astype(complex)
    q = recover_pressure(st_, P1, GRID)
    assert np.max(np.abs(q)) > 0.1
    assert np.max(np.abs(q.imag)) == 0.0


def test_pressure_solve_residual():
    for k in (1, 8):
        op = ModeOperator(P2, GRID, k)
        assert op.pressure_residual(random_state(k, GRID, seed=k)) <= 1e-12


# ----------------------------------------------------------------------------- right-hand side
def test_rhs_of_zero_is_zero():
    d = rhs(zero_state(3, GRID), P2, GRID)
    assert not np.any(d.stacked())


def test_rhs_on_eigenmode():
    sol = solve_hydrostatic(P1, GRID, 2)
    st_ = eigenmode_state(sol, GRID)
    d = rhs(st_, P1, GRID)
    err = np.linalg.norm(d.stacked() - sol.lam * st_.stacked()) / np.linalg.norm(st_.stacked())
    assert err <= 1e-6 * abs(sol.lam)


def test_rhs_keeps_divergence_small():
    op = ModeOperator(P2, GRID, 3)
    st_ = op.project(random_state(3, GRID, seed=5))
    assert op.div_residual(st_) <= 1e-12 * op.norm(st_)
    assert op.div_residual(op.rhs(st_)) <= 1e-12 * op.norm(op.rhs(st_))


def test_projection_is_idempotent():
    op = ModeOperator(P2, GRID, 2)
    st_ = random_state(2, GRID, seed=1)
    st_.v1 += 0.3  # add a divergent part
    once = op.project(st_)
    twice = op.project(once)
    assert np.linalg.norm(twice.stacked() - once.stacked()) <= 1e-12 * np.linalg.norm(once.stacked())


def test_mode_operator_rejects_bad_k():
    with pytest.raises(ValueError):
        ModeOperator(P1, GRID, 0)


# ----------------------------------------------------------------------------- growth rate fit
def test_growth_rate_exact_exponential():
    t = np.linspace(0, 10, 101)
    assert growth_rate(t, 0.5 * t + 3.0) == pytest.approx(0.5, abs=1e-12)
    assert growth_rate(t, np.full_like(t, 2.0)) == pytest.approx(0.0, abs=1e-12)


def test_growth_rate_window_rules():
    t = np.linspace(0, 10, 101)
    with pytest.raises(ValueError):
        growth_rate(t, t, window=0.1)
    with pytest.raises(ValueError):
        growth_rate(np.linspace(0, 1, 12), np.zeros(12), window=0.2)


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(-2, 2), offset=st.floats(-50, 50), window=st.floats(0.2, 1.0))
def test_growth_rate_recovers_linear_slope(rate, offset, window):
    t = np.linspace(0, 20, 201)
    assert growth_rate(t, rate * t + offset, window) == pytest.approx(rate, abs=1e-9)


# ----------------------------------------------------------------------------- time stepping
def test_zero_initial_data_stays_zero():
    final, rep = evolve(zero_state(2, GRID), 1.0, None, P1, GRID)
    assert not np.any(final.stacked())


def test_eigenmode_growth_rate():
    sol = solve_hydrostatic(P1, GRID, 2)
    _, rep = evolve(eigenmode_state(sol, GRID), 20.0, None, P1, GRID)
    assert rep.rate == pytest.approx(sol.lam.real, rel=0.01)
    assert relative_divergence(rep) <= 1e-8
    assert rep.fit_residual < 1e-6


def test_stable_profile_does_not_grow():
    _, rep = evolve(random_state(2, GRID, seed=0), 20.0, None, STABLE, GRID)
    assert rep.rate <= 0.01


def test_group_property():
    st0 = random_state(3, GRID, seed=2)
    a, _ = evolve(st0, 2.0, None, P2, GRID)
    b, _ = evolve(st0, 1.0, None, P2, GRID)
    b, _ = evolve(b, 1.0, None, P2, GRID)
    assert np.linalg.norm(a.stacked() - b.stacked()) <= 1e-10 * np.linalg.norm(a.stacked())
    assert b.t == pytest.approx(2.0)


def test_projection_off_reports_drift():
    _, on = evolve(random_state(2, GRID, seed=0), 5.0, None, P2, GRID)
    _, off = evolve(random_state(2, GRID, seed=0), 5.0, None, P2, GRID, project_each_step=False)
    assert relative_divergence(on) <= 1e-8
    assert off.meta["projected"] is False and on.meta["projected"] is True
    assert np.all(np.isfinite(off.div_residual))


def test_weighted_norm_gives_same_rate():
    sol = solve_hydrostatic(P1, GRID, 2)
    _, a = evolve(eigenmode_state(sol, GRID), 10.0, None, P1, GRID)
    _, b = evolve(eigenmode_state(sol, GRID), 10.0, None, P1, GRID, weighted_norm=True)
    assert b.rate == pytest.approx(a.rate, rel=1e-6)


def test_cfl_and_time_checks():
    st0 = random_state(2, GRID)
    with pytest.raises(ValueError):
        evolve(st0, 1.0, 10 * default_dt(P2, GRID), P2, GRID)
    with pytest.raises(ValueError):
        evolve(st0, 0.0, None, P2, GRID)
    assert default_dt(P2, GRID) == pytest.approx(0.5 * GRID.h)


def test_overflow_is_reported_with_time():
    st0 = random_state(2, GRID)
    st0.r *= 1e299
    with pytest.raises(EvolutionError) as info:
        evolve(st0, 5.0, None, P1, GRID)
    assert 0.0 < info.value.t_reached <= 5.0


# ----------------------------------------------------------------------------- wave packets
def test_wavepacket_constant_density_linear_growth():
    s = make_profile("constant", [2.0])
    for T in (2.0, 4.0, 8.0):
        rep = wavepacket_run(s, GRID, 0.0, (1.0, 0.0), (0.0, 0.0, 1.0), 1 / 16, T)
        assert rep.predicted == pytest.approx(math.sqrt(1 + (T / 2) ** 2), rel=1e-10)
        assert rep.mismatch < 0.01


def test_wavepacket_argument_checks():
    with pytest.raises(ValueError, match="integer"):
        wavepacket_run(P1, GRID, 0.0, (1.0, 0.0), (0.0, 0.0, 1.0), 0.3, 1.0)
    with pytest.raises(ValueError, match="fiber"):
        wavepacket_run(P1, GRID, 0.0, (1.0, 0.0), (1.0, 0.0, 0.0), 1 / 16, 1.0)


def test_p2_random_rate_decays_like_inverse_sqrt_T():
    # the fitted rate for sheared P2 is a slowly decaying transient, not an
    # instability: quadrupling T halves it, as for the cocycle exponent
    rates = {}
    for T in (100.0, 400.0):
        _, rep = evolve(random_state(8, GRID, seed=0), T, None, P2, GRID)
        rates[T] = rep.rate
    assert 0.85 < 2.0 * rates[400.0] / rates[100.0] < 1.2
    assert rates[400.0] <= 0.05
