"""Bicharacteristic flow, amplitude cocycle and its Lyapunov exponents.

For a shear flow the transport flow keeps the height x2 fixed and tilts the
frequency, xi(t) = (xi1, xi2 - U'(x2) xi1 t).  Along it the WKB amplitude
b = (b1, b2, r) solves b' = a0(x2, xi(t)) b, whose fundamental matrix B_t is
the cocycle.  Its growth restricted to the incompressible fiber
{(b1, b2) . xi = 0} defines the local exponents and the essential rate mu.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize_scalar

from ._rk import StepSizeUnderflow, integrate_linear
from .profiles import ALL_CRITICAL, Grid1D, SteadyState, critical_points

__all__ = [
    "CocycleResult",
    "PhasePoint",
    "StepSizeUnderflow",
    "asymptotic_gap",
    "cocycle_path",
    "euler_limit",
    "exponent_table",
    "fiber_basis",
    "flow",
    "integrate_cocycle",
    "integrate_cocycle_batch",
    "local_exponent",
    "local_exponents",
    "log_restricted_norm",
    "max_buoyancy",
    "mu_formula",
    "mu_numeric",
    "mu_numeric_history",
    "restricted_norm",
    "sobolev_cocycle",
    "sl_b2",
    "standard_samples",
    "sturm_coeff",
    "symbol_a0",
]

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
_CHUNK = 256


@dataclass(frozen=True)
class PhasePoint:
    """A point (x2; xi1, xi2) of the reduced cotangent bundle."""

    x2: float
    xi: tuple[float, float]

    def __post_init__(self):
        xi = (float(self.xi[0]), float(self.xi[1]))
        if not (xi[0] ** 2 + xi[1] ** 2 > 0.0):
            raise ValueError("phase point needs a nonzero frequency xi")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "x2", float(self.x2))

    @property
    def xi_norm(self) -> float:
        return math.hypot(*self.xi)


@dataclass
class CocycleResult:
    """Cocycle matrix B_T = exp(log_scale) * B with integration statistics."""

    B: np.ndarray
    log_scale: float
    initial: PhasePoint
    phase: PhasePoint
    T: float
    steps: int = 0
    rejected: int = 0
    error_estimate: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def matrix(self) -> np.ndarray:
        """The unscaled cocycle matrix (may overflow for huge growth)."""
        return self.B * math.exp(self.log_scale)


def flow(p: PhasePoint, t: float, s: SteadyState) -> PhasePoint:
    """Closed-form transport flow: x2 fixed, xi2 tilted by the shear."""
    xi1, xi2 = p.xi
    return PhasePoint(p.x2, (xi1, xi2 - float(s.dU(p.x2)) * xi1 * t))


def _symbol(dU, rho, drho, g, xi1, xi2):
    """Vectorized a0 for arrays of local profile values and frequencies."""
    n2 = xi1 * xi1 + xi2 * xi2
    a = np.zeros(np.shape(n2) + (3, 3))
    a[..., 0, 1] = -dU + 2.0 * dU * xi1 * xi1 / n2
    a[..., 0, 2] = g * xi1 * xi2 / (rho * n2)
    a[..., 1, 1] = 2.0 * dU * xi1 * xi2 / n2
    a[..., 1, 2] = -g * xi1 * xi1 / (rho * n2)
    a[..., 2, 1] = -drho
    return a


def symbol_a0(p: PhasePoint, s: SteadyState) -> np.ndarray:
    """The 3x3 amplitude matrix at (x2, xi); zero-homogeneous in xi."""
    y = p.x2
    return _symbol(float(s.dU(y)), float(s.rho(y)), float(s.drho(y)), s.g, p.xi[0], p.xi[1])


def fiber_basis(xi) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of the incompressible fiber over ``xi``."""
    xi1, xi2 = float(xi[0]), float(xi[1])
    n = math.hypot(xi1, xi2)
    if n == 0.0:
        raise ValueError("fiber basis needs a nonzero xi")
    return np.array([xi2 / n, -xi1 / n, 0.0]), np.array([0.0, 0.0, 1.0])


def _fiber_matrix(xi) -> np.ndarray:
    e1, e2 = fiber_basis(xi)
    return np.column_stack([e1, e2])


def _batch_results(points, s, times, rtol, atol):
    """Integrate the cocycle for many phase points at several output times."""
    x2 = np.array([p.x2 for p in points])
    xi1 = np.array([p.xi[0] for p in points])
    xi20 = np.array([p.xi[1] for p in points])
    dU, rho, drho = s.dU(x2), s.rho(x2), s.drho(x2)
    g = s.g

    def coeff(t, idx):
        return _symbol(dU[idx], rho[idx], drho[idx], g, xi1[idx], xi20[idx] - dU[idx] * xi1[idx] * t)

    Y0 = np.broadcast_to(np.eye(3), (len(points), 3, 3))
    return integrate_linear(coeff, Y0, times, rtol=rtol, atol=atol)


def integrate_cocycle_batch(points, T: float, s: SteadyState, tol: float = DEFAULT_RTOL,
                            atol: float = DEFAULT_ATOL) -> list[CocycleResult]:
    """Cocycle B_T for every phase point in ``points``."""
    if T < 0:
        raise ValueError(f"T must be nonnegative, got {T}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    points = list(points)
    if not points:
        return []
    sol = _batch_results(points, s, [T], tol, atol)
    return [CocycleResult(sol.Y[0, i].copy(), float(sol.log_scale[0, i]), p, flow(p, T, s), float(T),
                          int(sol.steps[i]), int(sol.rejected[i]), float(sol.error_estimate[i]))
            for i, p in enumerate(points)]


def integrate_cocycle(p: PhasePoint, T: float, s: SteadyState, tol: float = DEFAULT_RTOL,
                      atol: float = DEFAULT_ATOL) -> CocycleResult:
    """Solve dB/dt = a0(flow(p, t)) B with B(0) = I up to time T.

    Raises ``StepSizeUnderflow`` (with the time reached) if the adaptive
    step collapses.
    """
    return integrate_cocycle_batch([p], T, s, tol, atol)[0]


def cocycle_path(p: PhasePoint, times, s: SteadyState, tol: float = DEFAULT_RTOL,
                 atol: float = DEFAULT_ATOL) -> np.ndarray:
    """B_t at the increasing output ``times`` from one integration, shape (len(times), 3, 3)."""
    times = np.asarray(times, dtype=float)
    if times.size and (times[0] < 0 or np.any(np.diff(times) < 0)):
        raise ValueError("output times must be nonnegative and nondecreasing")
    sol = _batch_results([p], s, times, tol, atol)
    return sol.Y[:, 0] * np.exp(sol.log_scale[:, 0])[:, None, None]


def _log_fiber_norm(B, log_scale, xi0, xiT):
    M = _fiber_matrix(xiT).T @ B @ _fiber_matrix(xi0)
    sig = np.linalg.norm(M, 2)
    return math.log(sig) + log_scale if sig > 0 else -math.inf


def log_restricted_norm(result: CocycleResult, xi0=None) -> float:
    """Logarithm of ``restricted_norm``, safe against overflow."""
    xi0 = result.initial.xi if xi0 is None else xi0
    return _log_fiber_norm(result.B, result.log_scale, xi0, result.phase.xi)


def restricted_norm(result: CocycleResult, xi0=None) -> float:
    """Spectral norm of B_T mapping the fiber over xi0 into the fiber over xi(T)."""
    return math.exp(log_restricted_norm(result, xi0))


def local_exponent(p: PhasePoint, T: float, s: SteadyState, tol: float = DEFAULT_RTOL) -> float:
    """(1/T) log of the fiber-restricted cocycle norm at time T."""
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    return log_restricted_norm(integrate_cocycle(p, T, s, tol)) / T


def max_buoyancy(s: SteadyState, grid: Grid1D) -> tuple[float, float]:
    """Location and value of max g*max(rho0', 0)/rho0 over [-L, L].

    The grid maximum is refined by golden-section search on the bracketing
    pair of cells.
    """
    x = grid.x

    def f(y):
        return s.g * np.maximum(s.drho(y), 0.0) / s.rho(y)

    vals = f(x)
    i = int(np.argmax(vals))
    best_x, best = float(x[i]), float(vals[i])
    if 0 < i < grid.n - 1 and best > 0.0:
        res = minimize_scalar(lambda y: -float(f(y)), bracket=(x[i - 1], x[i], x[i + 1]),
                              method="golden", tol=1e-10)
        if -res.fun > best and x[0] <= res.x <= x[-1]:
            best_x, best = float(res.x), float(-res.fun)
    return best_x, best


def mu_formula(s: SteadyState, grid: Grid1D) -> float:
    """Closed-form essential rate: sqrt(g rho0'/rho0) maximized over critical heights.

    Critical heights are zeros of U' with rho0' > 0; when U vanishes
    identically every height is critical.  Returns 0 when none qualifies.
    """
    crit = critical_points(s, grid)
    if crit is ALL_CRITICAL:
        return math.sqrt(max_buoyancy(s, grid)[1])
    best = 0.0
    for y, drho in crit:
        if drho > 0.0:
            best = max(best, s.g * drho / float(s.rho(y)))
    return math.sqrt(best)


def standard_samples(grid: Grid1D, n_angles: int = 32, n_x2: int | None = None) -> list[PhasePoint]:
    """Sample phase points: heights times unit-circle directions.

    Heights are ``n_x2`` equispaced points on [-L, L] (default: the grid
    nodes).  Directions are ``n_angles`` equispaced angles plus the
    distinguished directions (1, 0) and (-1, 0) if not already present.
    """
    if n_angles < 1:
        raise ValueError("need at least one angle")
    heights = grid.x if n_x2 is None else np.linspace(-grid.L, grid.L, int(n_x2))
    th = 2.0 * np.pi * np.arange(n_angles) / n_angles
    dirs = [(math.cos(a), math.sin(a)) for a in th]
    for d in ((1.0, 0.0), (-1.0, 0.0)):
        if not any(abs(d[0] - u) < 1e-12 and abs(d[1] - v) < 1e-12 for u, v in dirs):
            dirs.append(d)
    return [PhasePoint(float(y), d) for y in heights for d in dirs]


def _chunk_exponents(args):
    points, s, times, tol, atol = args
    sol = _batch_results(points, s, times, tol, atol)
    out = np.empty((len(times), len(points)))
    for i, p in enumerate(points):
        for j, T in enumerate(times):
            xiT = (p.xi[0], p.xi[1] - float(s.dU(p.x2)) * p.xi[0] * T)
            out[j, i] = _log_fiber_norm(sol.Y[j, i], sol.log_scale[j, i], p.xi, xiT) / T
    return out


def local_exponents(samples, s, times, tol=DEFAULT_RTOL, atol=DEFAULT_ATOL, workers=1):
    """Local exponents of many samples at several horizons, shape (len(times), len(samples)).

    Samples are integrated in fixed chunks; the per-sample step control
    makes the result independent of the chunking and of ``workers``.
    """
    samples = list(samples)
    times = [float(T) for T in times]
    if not samples:
        return np.empty((len(times), 0))
    if any(not T > 0 for T in times):
        raise ValueError("exponent times must be positive")
    chunks = [(samples[i:i + _CHUNK], s, times, tol, atol) for i in range(0, len(samples), _CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_chunk_exponents, chunks))
    else:
        parts = [_chunk_exponents(c) for c in chunks]
    return np.concatenate(parts, axis=1)


def mu_numeric(s: SteadyState, samples, T: float, tol: float = DEFAULT_RTOL, workers: int = 1) -> float:
    """Largest local exponent over ``samples`` at horizon T."""
    return float(np.max(local_exponents(samples, s, [T], tol, workers=workers)[0]))


def mu_numeric_history(s: SteadyState, samples, T: float, T0: float = 25.0, tol: float = DEFAULT_RTOL,
                       workers: int = 1) -> list[tuple[float, float]]:
    """mu_numeric at horizons T0, 2 T0, ... up to T (T always included).

    All horizons come from a single integration, so the cost is that of the
    longest run.
    """
    times = []
    t = T0
    while t < T:
        times.append(t)
        t *= 2.0
    times.append(float(T))
    ex = local_exponents(samples, s, times, tol, workers=workers)
    return [(T_, float(np.max(row))) for T_, row in zip(times, ex)]


def exponent_table(s: SteadyState, samples, T: float, tol: float = DEFAULT_RTOL, workers: int = 1):
    """Rows (x2, xi1, xi2, T, exponent), one per sample."""
    samples = list(samples)
    ex = local_exponents(samples, s, [T], tol, workers=workers)[0]
    return [(p.x2, p.xi[0], p.xi[1], float(T), float(e)) for p, e in zip(samples, ex)]


def _xi_antiderivative(dU, xi1, xi2, t):
    """Closed form of the integral of xi2(s)/|xi(s)|^2 over [0, t]."""
    n0 = xi1 * xi1 + xi2 * xi2
    if abs(dU * xi1) < 1e-14:
        return xi2 * t / n0
    x2t = xi2 - dU * xi1 * t
    return -(math.log(xi1 * xi1 + x2t * x2t) - math.log(n0)) / (2.0 * dU * xi1)


def sturm_coeff(p: PhasePoint, t: float, s: SteadyState) -> tuple[float, float]:
    """Coefficient p(t) of v'' + p(t) v = 0 and the factor v/u along the flow.

    Here u = b2 and v = exp(-int_0^t alpha) u with
    alpha = 2 U' xi1 xi2(t) / |xi(t)|^2, which removes the first-derivative
    term of the second-order equation for b2.
    """
    y = p.x2
    dU, rho, drho = float(s.dU(y)), float(s.rho(y)), float(s.drho(y))
    xi1, xi2 = p.xi
    x2t = xi2 - dU * xi1 * t
    n2 = xi1 * xi1 + x2t * x2t
    assert n2 > 0.0, "|xi(t)| vanished"
    coeff = -s.g * drho / rho * xi1 * xi1 / n2
    factor = math.exp(-2.0 * dU * xi1 * _xi_antiderivative(dU, xi1, xi2, t))
    return coeff, factor


def euler_limit(x2: float, s: SteadyState) -> float:
    """Limit of t^2 p(t) as t -> infinity at a height with U' != 0."""
    dU = float(s.dU(x2))
    if dU == 0.0:
        raise ValueError("the limit exists only where U' != 0")
    return -s.g * float(s.drho(x2)) / (float(s.rho(x2)) * dU * dU)


def sl_b2(p: PhasePoint, times, s: SteadyState, b0, tol: float = 1e-12) -> np.ndarray:
    """b2 along the flow via the Sturm-Liouville form.

    Integrates v'' + p(t) v = 0 with v(0) = b2(0), v'(0) = -beta(0) r(0),
    beta = g xi1^2/(rho0 |xi|^2), then maps back with u = v / factor.
    """
    times = np.asarray(times, dtype=float)
    y = p.x2
    rho = float(s.rho(y))
    xi1, xi2 = p.xi
    beta0 = s.g * xi1 * xi1 / (rho * (xi1 * xi1 + xi2 * xi2))
    b0 = np.asarray(b0, dtype=float)

    def rhs(t, z):
        return [z[1], -sturm_coeff(p, t, s)[0] * z[0]]

    sol = solve_ivp(rhs, (0.0, float(times.max(initial=0.0))), [b0[1], -beta0 * b0[2]],
                    method="DOP853", t_eval=times, rtol=tol, atol=tol * 1e-2)
    if not sol.success:
        raise RuntimeError(sol.message)
    factors = np.array([sturm_coeff(p, t, s)[1] for t in times])
    return sol.y[0] / factors


def sobolev_cocycle(p: PhasePoint, T: float, m: float, s: SteadyState, tol: float = DEFAULT_RTOL) -> CocycleResult:
    """B^m_T = (|xi(-T)|/|xi0|)^m B_T, the cocycle in Sobolev-weighted form."""
    res = integrate_cocycle(p, T, s, tol)
    back = flow(p, -T, s)
    res.log_scale += m * (math.log(back.xi_norm) - math.log(p.xi_norm))
    res.extra["m"] = m
    return res


def asymptotic_gap(x2, T: float, s: SteadyState, rho_bar=None, n_angles: int = 16,
                   tol: float = DEFAULT_RTOL) -> float:
    """Largest spectral-norm gap between B_T and the constant-coefficient cocycle.

    The reference is [[I2, (g/rho_bar(x2)) (xi1/|xi|^2) (xi2, -xi1) T], [0, 1]],
    maximized over ``n_angles`` unit directions.  ``rho_bar`` defaults to rho0.
    """
    if isinstance(x2, PhasePoint):
        x2 = x2.x2
    rho_bar = s.rho if rho_bar is None else rho_bar
    rb = float(rho_bar(x2))
    th = 2.0 * np.pi * np.arange(n_angles) / n_angles
    pts = [PhasePoint(x2, (math.cos(a), math.sin(a))) for a in th]
    gap = 0.0
    for p, res in zip(pts, integrate_cocycle_batch(pts, T, s, tol)):
        xi1, xi2 = p.xi
        n2 = xi1 * xi1 + xi2 * xi2
        Bbar = np.eye(3)
        Bbar[0, 2] = s.g / rb * xi1 * xi2 / n2 * T
        Bbar[1, 2] = -s.g / rb * xi1 * xi1 / n2 * T
        gap = max(gap, float(np.linalg.norm(res.matrix - Bbar, 2)))
    return gap
