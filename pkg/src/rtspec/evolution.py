"""Linearized dynamics for one horizontal wavenumber k.

The perturbation exp(i k x1) (v1, v2, r)(x2, t) obeys

    d v1/dt = -i k U v1 - U' v2 - i k q / rho0
    d v2/dt = -i k U v2 - D q / rho0 - g r / rho0
    d r/dt  = -i k U r - rho0' v2

with i k v1 + D v2 = 0.  The discretization is staggered: v2 and r live on
the nodes (v2 = 0 at the walls), v1 and the pressure q on the n-1 cell
midpoints.  The pressure solves the discrete equation div(grad q / rho0) =
div(forcing), i.e. the pressure equation obtained by taking the divergence
of the momentum equations, so the tendency is exactly divergence free.
With this layout the hydrostatic eigenvectors of ``rayleigh.assemble`` are
exact discrete eigenmodes of the U = 0 dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .cocycle import PhasePoint, integrate_cocycle
from .profiles import Grid1D, SteadyState

__all__ = [
    "EvolutionError",
    "GrowthReport",
    "ModeOperator",
    "ModeState",
    "WavepacketReport",
    "default_dt",
    "eigenmode_state",
    "evolve",
    "growth_rate",
    "random_state",
    "recover_pressure",
    "rhs",
    "wavepacket_run",
]


class EvolutionError(RuntimeError):
    """Non-finite or overflowing state during time stepping."""

    def __init__(self, message: str, t_reached: float):
        super().__init__(f"{message} at t = {t_reached:.6g}")
        self.t_reached = t_reached


@dataclass
class ModeState:
    """Complex fields of one Fourier mode: v1 on midpoints, v2 and r on nodes."""

    k: int
    t: float
    v1: np.ndarray
    v2: np.ndarray
    r: np.ndarray
    q: np.ndarray | None = None

    def combine(self, a: float, other: "ModeState") -> "ModeState":
        """self + a * other, field by field (time of self)."""
        return ModeState(self.k, self.t, self.v1 + a * other.v1, self.v2 + a * other.v2, self.r + a * other.r)

    def copy(self) -> "ModeState":
        return ModeState(self.k, self.t, self.v1.copy(), self.v2.copy(), self.r.copy(),
                         None if self.q is None else self.q.copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.v1, self.v2, self.r])


def _hyper(f: np.ndarray, order: int, ghost: str) -> np.ndarray:
    """(-delta^2/4)^order f with ghost values 'zero', 'even' or 'wall'.

    'wall' keeps the end values fixed (their result is zero).
    """
    for _ in range(order):
        if ghost == "wall":
            g = np.zeros_like(f)
            g[1:-1] = -(f[2:] - 2.0 * f[1:-1] + f[:-2]) / 4.0
        else:
            lo, hi = (f[0], f[-1]) if ghost == "even" else (0.0, 0.0)
            p = np.concatenate([[lo], f, [hi]])
            g = -(p[2:] - 2.0 * p[1:-1] + p[:-2]) / 4.0
        f = g
    return f


class ModeOperator:
    """Discrete right-hand side, pressure solve and projection for one k.

    Parameters
    ----------
    filter_strength : float
        Coefficient of an eighth-order hyperdiffusion with symbol
        -filter_strength * sin(xi h / 2)**8.  It leaves resolved scales
        untouched and removes grid-scale modes that the shear tilts through
        the resolution limit and that would otherwise show up as spurious
        instabilities.  Set to 0 for the bare scheme.
    """

    def __init__(self, s: SteadyState, grid: Grid1D, k: int, filter_strength: float = 1.0,
                 filter_order: int = 4):
        if int(k) != k or k < 1:
            raise ValueError(f"k must be a positive integer, got {k}")
        self.s, self.grid, self.k = s, grid, int(k)
        self.filter_strength = float(filter_strength)
        self.filter_order = int(filter_order)
        y, ym = grid.x, grid.xmid
        h = grid.h
        self.h = h
        self.U_n, self.rho_n, self.drho_n = s.U(y), s.rho(y), s.drho(y)
        self.U_h, self.dU_h, self.rho_h = s.U(ym), s.dU(ym), s.rho(ym)
        m = grid.n - 1
        cpl = 1.0 / (h * h * self.rho_n[1:-1])
        diag = (-self.k**2 / self.rho_h).astype(complex)
        diag[:-1] -= cpl
        diag[1:] -= cpl
        self._E = (cpl.astype(complex), diag, cpl.astype(complex))
        dl, d, du, du2, ipiv, info = lapack.zgttrf(*self._E)
        assert info == 0, "pressure operator is singular"
        self._lu = (dl, d, du, du2, ipiv)
        assert m == diag.size

    # discrete operators -------------------------------------------------
    def divergence(self, v1, v2) -> np.ndarray:
        return 1j * self.k * v1 + (v2[1:] - v2[:-1]) / self.h

    def apply_E(self, q) -> np.ndarray:
        lo, d, up = self._E
        out = d * q
        out[:-1] += up * q[1:]
        out[1:] += lo * q[:-1]
        return out

    def solve_E(self, b) -> np.ndarray:
        x, info = lapack.zgttrs(*self._lu, np.asarray(b, dtype=complex))
        assert info == 0
        return x

    def _grad(self, q):
        """rho0-weighted gradient: (i k q / rho_half, D q / rho_node) with zero at walls."""
        g2 = np.zeros(self.grid.n, dtype=complex)
        g2[1:-1] = (q[1:] - q[:-1]) / (self.h * self.rho_n[1:-1])
        return 1j * self.k * q / self.rho_h, g2

    # dynamics -----------------------------------------------------------
    def forcing(self, st: ModeState):
        """Tendencies without the pressure term."""
        k = self.k
        f1 = -1j * k * self.U_h * st.v1 - self.dU_h * 0.5 * (st.v2[1:] + st.v2[:-1])
        f2 = -1j * k * self.U_n * st.v2 - self.s.g * st.r / self.rho_n
        f2[0] = f2[-1] = 0.0
        fr = -1j * k * self.U_n * st.r - self.drho_n * st.v2
        if self.filter_strength:
            gam, p = self.filter_strength, self.filter_order
            f1 = f1 - gam * _hyper(st.v1, p, "even")
            f2 = f2 - gam * _hyper(st.v2, p, "wall")
            fr = fr - gam * _hyper(st.r, p, "zero")
        return f1, f2, fr

    def pressure(self, st: ModeState) -> np.ndarray:
        f1, f2, _ = self.forcing(st)
        return self.solve_E(self.divergence(f1, f2))

    def pressure_residual(self, st: ModeState) -> float:
        """Relative residual of the tridiagonal pressure solve."""
        f1, f2, _ = self.forcing(st)
        b = self.divergence(f1, f2)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return 0.0
        return float(np.linalg.norm(self.apply_E(self.solve_E(b)) - b) / nb)

    def rhs(self, st: ModeState) -> ModeState:
        f1, f2, fr = self.forcing(st)
        q = self.solve_E(self.divergence(f1, f2))
        g1, g2 = self._grad(q)
        out = ModeState(self.k, st.t, f1 - g1, f2 - g2, fr)
        out.q = q
        return out

    def project(self, st: ModeState) -> ModeState:
        """Remove the divergence with the same rho0-weighted elliptic operator."""
        psi = self.solve_E(self.divergence(st.v1, st.v2))
        g1, g2 = self._grad(psi)
        return ModeState(st.k, st.t, st.v1 - g1, st.v2 - g2, st.r.copy())

    def norm(self, st: ModeState, weighted: bool = False) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            return self._norm(st, weighted)

    def _norm(self, st: ModeState, weighted: bool) -> float:
        if weighted:
            tot = np.sum(self.rho_h * np.abs(st.v1) ** 2) + np.sum(self.rho_n * np.abs(st.v2) ** 2)
        else:
            tot = np.sum(np.abs(st.v1) ** 2) + np.sum(np.abs(st.v2) ** 2)
        tot += np.sum(np.abs(st.r) ** 2)
        return math.sqrt(self.h * float(tot))

    def div_residual(self, st: ModeState) -> float:
        return float(np.max(np.abs(self.divergence(st.v1, st.v2))))

    def step(self, st: ModeState, dt: float) -> ModeState:
        """One classical Runge-Kutta step."""
        a = self.rhs(st)
        b = self.rhs(st.combine(0.5 * dt, a))
        c = self.rhs(st.combine(0.5 * dt, b))
        d = self.rhs(st.combine(dt, c))
        w = dt / 6.0
        return ModeState(st.k, st.t + dt,
                         st.v1 + w * (a.v1 + 2 * b.v1 + 2 * c.v1 + d.v1),
                         st.v2 + w * (a.v2 + 2 * b.v2 + 2 * c.v2 + d.v2),
                         st.r + w * (a.r + 2 * b.r + 2 * c.r + d.r))


def recover_pressure(state: ModeState, s: SteadyState, grid: Grid1D, filter_strength: float = 1.0) -> np.ndarray:
    """Pressure on the cell midpoints for the given state.

    For a divergence-free state the right-hand side reduces to the
    discretization of -2 i k U' v2 - g D(r / rho0) (plus the filter term).
    """
    q = ModeOperator(s, grid, state.k, filter_strength).pressure(state)
    state.q = q
    return q


def rhs(state: ModeState, s: SteadyState, grid: Grid1D, filter_strength: float = 1.0) -> ModeState:
    """Time derivative of ``state`` (pressure included)."""
    return ModeOperator(s, grid, state.k, filter_strength).rhs(state)


def default_dt(s: SteadyState, grid: Grid1D, cfl: float = 0.5) -> float:
    """CFL-limited step cfl * h / max(|U|, 1)."""
    return cfl * grid.h / max(float(np.max(np.abs(s.U(grid.x)))), 1.0)


@dataclass
class GrowthReport:
    """Norm history of a run and the exponential rate fitted on its tail."""

    times: np.ndarray
    log_norm: np.ndarray
    div_residual: np.ndarray
    rate: float
    fit_residual: float
    window: float
    meta: dict = field(default_factory=dict)


def growth_rate(times, log_norm, window: float = 0.5, return_residual: bool = False):
    """Least-squares slope of log-norm over the trailing ``window`` of the run.

    The window must cover at least 20% of the run and hold at least 10
    samples.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(log_norm, dtype=float)
    if not 0.2 <= window <= 1.0:
        raise ValueError(f"fit window must be between 0.2 and 1 of the run, got {window}")
    if t.size < 2:
        raise ValueError("need a time series to fit")
    t_start = t[-1] - window * (t[-1] - t[0])
    sel = t >= t_start - 1e-12 * max(1.0, abs(t[-1]))
    if np.count_nonzero(sel) < 10:
        raise ValueError(f"fit window holds {np.count_nonzero(sel)} samples, need at least 10")
    tt, yy = t[sel], y[sel]
    A = np.column_stack([tt, np.ones_like(tt)])
    coef, *_ = np.linalg.lstsq(A, yy, rcond=None)
    rate = float(coef[0])
    if return_residual:
        return rate, float(np.sqrt(np.mean((A @ coef - yy) ** 2)))
    return rate


def evolve(state0: ModeState, T: float, dt: float | None, s: SteadyState, grid: Grid1D,
           project_each_step: bool = True, filter_strength: float = 1.0, cfl: float = 0.5,
           n_records: int = 400, window: float = 0.5, weighted_norm: bool = False):
    """Integrate to time T with fixed-step RK4.

    Returns the final state and a ``GrowthReport`` whose norm history is
    sampled about ``n_records`` times.  Raises ``EvolutionError`` with the
    time reached when the state stops being finite.
    """
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    dt_max = default_dt(s, grid, cfl)
    if dt is None:
        dt = dt_max
    if not 0 < dt <= dt_max * (1 + 1e-12):
        raise ValueError(f"dt = {dt} violates the CFL bound {dt_max}")
    nsteps = max(1, int(math.ceil(T / dt - 1e-9)))
    dt = T / nsteps
    op = ModeOperator(s, grid, state0.k, filter_strength)
    every = max(1, nsteps // max(1, n_records))
    st = state0.copy()
    t0 = st.t
    times, logs, divs = [t0], [], []

    def record(x):
        nv = op.norm(x, weighted_norm)
        logs.append(math.log(nv) if nv > 0 else -math.inf)
        divs.append(op.div_residual(x))

    record(st)
    for i in range(1, nsteps + 1):
        st = op.step(st, dt)
        st.t = t0 + i * dt
        if project_each_step:
            st = op.project(st)
        if i % every == 0 or i == nsteps:
            nv = op.norm(st)
            if not np.isfinite(nv) or nv > 1e300:
                raise EvolutionError("non-finite state", st.t)
            times.append(st.t)
            record(st)
    times = np.array(times)
    logs = np.array(logs)
    if np.all(np.isfinite(logs)):
        rate, res = growth_rate(times, logs, window, return_residual=True)
    else:
        rate, res = 0.0, 0.0
    report = GrowthReport(times, logs, np.array(divs), rate, res, window,
                          {"dt": dt, "steps": nsteps, "projected": project_each_step,
                           "filter_strength": filter_strength})
    return st, report


def eigenmode_state(sol, grid: Grid1D) -> ModeState:
    """Fields of a Rayleigh eigen-solution: v2 = i k phi, v1 = -D phi, r as solved."""
    phi = np.asarray(sol.phi, dtype=complex)
    k = sol.k
    v1 = -(phi[1:] - phi[:-1]) / grid.h
    v2 = 1j * k * phi
    v2[0] = v2[-1] = 0.0
    return ModeState(k, 0.0, v1, v2, np.asarray(sol.r, dtype=complex).copy())


def random_state(k: int, grid: Grid1D, seed: int = 0) -> ModeState:
    """Divergence-free complex white noise in v2 and r (v1 from the constraint)."""
    rng = np.random.default_rng(seed)
    n = grid.n
    v2 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v2[0] = v2[-1] = 0.0
    r = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v1 = 1j * (v2[1:] - v2[:-1]) / (grid.h * k)
    return ModeState(int(k), 0.0, v1, v2, r)


@dataclass
class WavepacketReport:
    k: int
    delta: float
    T: float
    predicted: float
    measured: float
    ratio: float
    mismatch: float
    initial_measured: float


def wavepacket_run(s: SteadyState, grid: Grid1D, x20: float, xi0, b0, delta: float, T: float,
                   dt: float | None = None, filter_strength: float = 1.0, tol: float = 1e-10,
                   width: float = 1.0) -> WavepacketReport:
    """Evolve a localized high-frequency packet and compare with the cocycle.

    The packet is the projection of b0 * h(x2) * exp(i xi0_2 x2 / delta)
    with Fourier index k = xi0_1 / delta and Gaussian envelope
    h = exp(-(x2 - x20)^2 / (2 width^2)).  The measured amplitude is the
    Euclidean norm of the fields interpolated at x20; the prediction is
    |B_T(x20, xi0) b0| h(x20).
    """
    xi1, xi2 = float(xi0[0]), float(xi0[1])
    kf = xi1 / delta
    k = int(round(kf))
    if k < 1 or abs(kf - k) > 1e-9 * max(1.0, abs(kf)):
        raise ValueError(f"xi0_1/delta = {kf} is not a positive integer")
    b0 = np.asarray(b0, dtype=complex)
    xn = math.hypot(xi1, xi2)
    if abs(b0[0] * xi1 + b0[1] * xi2) > 1e-12 * max(1.0, float(np.linalg.norm(b0))) * xn:
        raise ValueError("b0 must lie in the fiber of xi0: (b1, b2) . xi0 = 0")

    y, ym = grid.x, grid.xmid

    def env(z):
        return np.exp(-((z - x20) ** 2) / (2.0 * width**2)) * np.exp(1j * xi2 * z / delta)

    v2 = b0[1] * env(y)
    v2[0] = v2[-1] = 0.0
    st = ModeState(k, 0.0, b0[0] * env(ym), v2, b0[2] * env(y))
    op = ModeOperator(s, grid, k, filter_strength)
    st = op.project(st)

    def amplitude(state):
        a1 = np.interp(x20, ym, state.v1.real) + 1j * np.interp(x20, ym, state.v1.imag)
        a2 = np.interp(x20, y, state.v2.real) + 1j * np.interp(x20, y, state.v2.imag)
        a3 = np.interp(x20, y, state.r.real) + 1j * np.interp(x20, y, state.r.imag)
        return float(np.linalg.norm([a1, a2, a3]))

    initial = amplitude(st)
    final, _ = evolve(st, T, dt, s, grid, project_each_step=True, filter_strength=filter_strength)
    measured = amplitude(final)
    res = integrate_cocycle(PhasePoint(x20, (xi1, xi2)), T, s, tol)
    predicted = float(np.linalg.norm(res.matrix @ b0))
    ratio = measured / predicted
    return WavepacketReport(k, float(delta), float(T), predicted, measured, ratio, abs(ratio - 1.0), initial)
