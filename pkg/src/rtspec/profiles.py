"""Steady stratified shear profiles and checks of their standing assumptions.

Every family has a density layer

    rho0(y) = rho_mean + rho_jump * tanh(y / width)

and a family-specific horizontal velocity U(y).  All evaluators are closed
form, so U', U'', rho0', rho0'' carry no differentiation error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq, minimize_scalar

__all__ = [
    "ALL_CRITICAL",
    "AssumptionCheck",
    "FAMILIES",
    "Grid1D",
    "SteadyState",
    "ValidationReport",
    "critical_points",
    "make_profile",
    "validate_assumptions",
]


def _sech2(y):
    """sech(y)**2 without overflow for large |y|."""
    e = np.exp(-2.0 * np.abs(y))
    return 4.0 * e / (1.0 + e) ** 2


def _shear_none(y, w):
    z = np.zeros_like(np.asarray(y, dtype=float))
    return z, z, z


def _shear_tanh(y, w):
    t = np.tanh(y / w)
    s2 = _sech2(y / w)
    return t, s2 / w, -2.0 * s2 * t / w**2


def _shear_tanh2(y, w):
    t = np.tanh(y / w)
    s2 = _sech2(y / w)
    return t * t, 2.0 * t * s2 / w, 2.0 * s2 * (s2 - 2.0 * t * t) / w**2


# family -> (shear evaluator, shear-free flag, default density params)
FAMILIES: dict[str, tuple[Callable, bool, tuple[float, ...]]] = {
    "P1": (_shear_none, True, (2.0, 1.0, 1.0)),
    "P2": (_shear_tanh, False, (2.0, 1.0, 1.0)),
    "P3": (_shear_tanh2, False, (2.0, 1.0, 1.0)),
    "constant": (_shear_none, True, (1.0, 0.0, 1.0)),
}

_PARAM_DOC = {
    "P1": "[rho_mean, rho_jump, width] (U = 0)",
    "P2": "[rho_mean, rho_jump, width] (U = tanh(y/width))",
    "P3": "[rho_mean, rho_jump, width] (U = tanh(y/width)**2)",
    "constant": "[rho_bar] (U = 0, rho0 = rho_bar)",
}


@dataclass(frozen=True)
class SteadyState:
    """Background flow (U, rho0, g) of a built-in family.

    Parameters
    ----------
    family : str
        Family tag, one of ``FAMILIES``.
    params : tuple of float
        Density layer ``(rho_mean, rho_jump, width)``.
    g : float
        Gravitational acceleration.
    """

    family: str
    params: tuple[float, ...]
    g: float = 1.0

    @property
    def rho_mean(self) -> float:
        return self.params[0]

    @property
    def rho_jump(self) -> float:
        return self.params[1]

    @property
    def width(self) -> float:
        return self.params[2]

    @property
    def shear_free(self) -> bool:
        """True when U vanishes identically."""
        return FAMILIES[self.family][1]

    @property
    def rho_plus(self) -> float:
        return self.rho_mean + self.rho_jump

    @property
    def rho_minus(self) -> float:
        return self.rho_mean - self.rho_jump

    def _shear(self, y):
        return FAMILIES[self.family][0](np.asarray(y, dtype=float), self.width)

    def U(self, y):
        return self._shear(y)[0]

    def dU(self, y):
        return self._shear(y)[1]

    def d2U(self, y):
        return self._shear(y)[2]

    def rho(self, y):
        return self.rho_mean + self.rho_jump * np.tanh(np.asarray(y, dtype=float) / self.width)

    def drho(self, y):
        return self.rho_jump / self.width * _sech2(np.asarray(y, dtype=float) / self.width)

    def d2rho(self, y):
        y = np.asarray(y, dtype=float) / self.width
        return -2.0 * self.rho_jump / self.width**2 * _sech2(y) * np.tanh(y)

    def without_shear(self) -> "SteadyState":
        """Copy with the same density and gravity but U set to zero."""
        if self.shear_free:
            return self
        return SteadyState("P1", self.params, self.g)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params), "g": self.g}


@dataclass(frozen=True)
class Grid1D:
    """Uniform node grid on [-L, L] with ``n`` points."""

    L: float
    n: int

    def __post_init__(self):
        if not (self.L > 0.0 and np.isfinite(self.L)):
            raise ValueError(f"grid half-width must be positive, got L={self.L}")
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"grid needs an integer n >= 3, got n={self.n}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.n)

    @property
    def xmid(self) -> np.ndarray:
        """The n-1 cell midpoints."""
        x = self.x
        return 0.5 * (x[1:] + x[:-1])

    def refined(self) -> "Grid1D":
        """Grid with every cell halved (2n-1 nodes)."""
        return Grid1D(self.L, 2 * self.n - 1)


def make_profile(family: str, params=(), g: float = 1.0) -> SteadyState:
    """Build a steady state of a built-in family.

    ``params`` may be empty, in which case the family defaults are used
    (``rho0 = 2 + tanh(y)`` for P1, P2, P3).  For ``constant`` the single
    parameter is the uniform density.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown profile family {family!r}; expected one of {sorted(FAMILIES)}")
    params = tuple(float(p) for p in params)
    if family == "constant":
        if len(params) > 1:
            raise ValueError(f"family 'constant' takes {_PARAM_DOC[family]}, got {list(params)}")
        rho_bar = params[0] if params else 1.0
        params = (rho_bar, 0.0, 1.0)
    else:
        if len(params) not in (0, 3):
            raise ValueError(f"family {family!r} takes {_PARAM_DOC[family]}, got {list(params)}")
        params = params or FAMILIES[family][2]
    if not all(np.isfinite(params)):
        raise ValueError(f"profile parameters must be finite, got {list(params)}")
    if params[2] <= 0.0:
        raise ValueError(f"layer width must be positive, got {params[2]}")
    rho_lo = min(params[0] - params[1], params[0] + params[1])
    if rho_lo < 0.0:
        raise ValueError(f"density limit must be non-negative, got {rho_lo}")
    if not (g > 0.0 and np.isfinite(g)):
        raise ValueError(f"gravity must be positive, got {g}")
    return SteadyState(family, params, float(g))


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    worst_x2: float
    worst_value: float


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[AssumptionCheck, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def validate_assumptions(s: SteadyState, grid: Grid1D, tol: float) -> ValidationReport:
    """Check positivity of rho0 and decay of the profile derivatives.

    Positivity is checked on every node and on the two limits rho+ and rho-.
    Decay is checked at the two end nodes: each of |U'|, |U''|, |rho0'|,
    |rho0''| must be below ``tol`` there.
    """
    if not tol > 0.0:
        raise ValueError(f"tol must be positive, got {tol}")
    x = grid.x
    rho = s.rho(x)
    i = int(np.argmin(rho))
    worst_x, worst_rho = float(x[i]), float(rho[i])
    for y_lim, r_lim in ((-np.inf, s.rho_minus), (np.inf, s.rho_plus)):
        if r_lim < worst_rho:
            worst_x, worst_rho = y_lim, r_lim
    checks = [AssumptionCheck("rho_positive", worst_rho > 0.0, worst_x, worst_rho)]

    ends = np.array([x[0], x[-1]])
    for name, fn in (("decay_dU", s.dU), ("decay_d2U", s.d2U),
                     ("decay_drho", s.drho), ("decay_d2rho", s.d2rho)):
        vals = np.abs(fn(ends))
        j = int(np.argmax(vals))
        checks.append(AssumptionCheck(name, bool(vals[j] < tol), float(ends[j]), float(vals[j])))
    return ValidationReport(tuple(checks))


class _AllCritical:
    """Sentinel: U' vanishes identically, so every height is critical."""

    def __repr__(self):
        return "ALL_CRITICAL"

    def __reduce__(self):
        return "ALL_CRITICAL"


ALL_CRITICAL = _AllCritical()


def critical_points(s: SteadyState, grid: Grid1D):
    """Zeros of U' on [-L, L] paired with rho0' there.

    Returns ``ALL_CRITICAL`` when U is identically zero.  Sign changes are
    bracketed on the grid and refined by Brent's method; tangential zeros are
    sought at grid-local minima of |U'| below 1e-8.
    """
    x = grid.x
    d = s.dU(x)
    if s.shear_free or not np.any(d):
        return ALL_CRITICAL

    roots = []
    exact = np.flatnonzero(d == 0.0)
    roots.extend(float(x[i]) for i in exact)
    change = np.flatnonzero(d[:-1] * d[1:] < 0.0)
    for i in change:
        roots.append(brentq(s.dU, x[i], x[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps))

    a = np.abs(d)
    local_min = np.flatnonzero((a[1:-1] <= a[:-2]) & (a[1:-1] <= a[2:]) & (a[1:-1] < 1e-8))
    for i in local_min + 1:
        if d[i] == 0.0 or d[i - 1] * d[i + 1] < 0.0 or d[i - 1] * d[i] < 0.0 or d[i] * d[i + 1] < 0.0:
            continue
        res = minimize_scalar(lambda y: abs(float(s.dU(y))), bounds=(x[i - 1], x[i + 1]),
                              method="bounded", options={"xatol": 1e-14})
        if abs(float(s.dU(res.x))) < 1e-12:
            roots.append(float(res.x))

    out = []
    for r in sorted(roots):
        if abs(float(s.dU(r))) >= 1e-12:
            continue
        if out and abs(r - out[-1][0]) < grid.h * 1e-6:
            continue
        out.append((r, float(s.drho(r))))
    return out
