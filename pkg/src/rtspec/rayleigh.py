"""Rayleigh eigenvalue problem for a single horizontal wavenumber k.

Unknowns are the stream-function profile phi(y) and the phase speed c with
growth rate lambda = -i k c.  The hydrostatic problem (U = 0) is the
generalized symmetric eigenproblem B phi = sigma A phi with

    (A phi, phi) = sum rho0 (phi')^2 + k^2 rho0 phi^2,   (B phi, phi) = sum g rho0' phi^2,

and lambda_k = k sqrt(sigma_max).  With shear strength eps the profile
solves F(eps, c, phi) = 0,

    F = -(rho0 phi')' + k^2 rho0 phi + eps (rho0 U')'/(eps U - c) phi + g rho0'/(eps U - c)^2 phi,

which is continued from eps = 0 by bordered Newton iteration.

All grid functions span the full node set with phi = 0 at y = +-L.
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded
from scipy.sparse.linalg import splu

from .cocycle import max_buoyancy, mu_formula
from .profiles import Grid1D, SteadyState

__all__ = [
    "ContinuationError",
    "CriticalLayerError",
    "EigenSolution",
    "OperatorPair",
    "assemble",
    "continue_in_eps",
    "jacobian",
    "lambda_sequence",
    "recover_r",
    "relabel_check",
    "residual_F",
    "residual_norm",
    "solve_hydrostatic",
    "wronskian_drift",
]


class ContinuationError(RuntimeError):
    """Newton continuation failed even after the allowed step halvings."""


class CriticalLayerError(ValueError):
    """eps U - c vanishes on the grid."""


@dataclass
class OperatorPair:
    """Tridiagonal stiffness-plus-mass form A and buoyancy form B on interior nodes.

    ``a_diag``/``a_off`` hold the diagonal and the first off-diagonal of A;
    B is diagonal with entries ``b_diag``.
    """

    k: int
    grid: Grid1D
    a_diag: np.ndarray
    a_off: np.ndarray
    b_diag: np.ndarray
    mass: np.ndarray

    @property
    def A(self) -> sp.csr_matrix:
        return sp.diags([self.a_off, self.a_diag, self.a_off], [-1, 0, 1], format="csr")

    @property
    def B(self) -> sp.csr_matrix:
        return sp.diags(self.b_diag, 0, format="csr")

    def upper_banded(self, shift: float = 0.0) -> np.ndarray:
        """(shift*A - B) in LAPACK upper banded storage."""
        ab = np.zeros((2, self.a_diag.size))
        ab[0, 1:] = shift * self.a_off
        ab[1] = shift * self.a_diag - self.b_diag
        return ab

    def apply_A(self, x: np.ndarray) -> np.ndarray:
        y = self.a_diag * x
        y[:-1] += self.a_off * x[1:]
        y[1:] += self.a_off * x[:-1]
        return y


@dataclass
class EigenSolution:
    """An eigen-pair (c, phi) with the recovered density profile r."""

    k: int
    eps: float
    c: complex
    phi: np.ndarray | None
    r: np.ndarray | None
    residual: float
    status: str = "converged"
    sigma: float = float("nan")
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def lam(self) -> complex:
        return -1j * self.k * self.c

    @property
    def stable(self) -> bool:
        return self.status == "stable"


def _inner(grid: Grid1D, f, g) -> complex:
    """Discrete L2 product h * sum conj(f) g over all nodes."""
    return grid.h * np.vdot(f, g)


def _norm(grid: Grid1D, f) -> float:
    return math.sqrt(grid.h * float(np.sum(np.abs(f) ** 2)))


def assemble(s: SteadyState, grid: Grid1D, k: int) -> OperatorPair:
    """Finite-volume discretization of the two quadratic forms with Dirichlet ends.

    Density in the flux term is sampled at cell midpoints, so
    A_ii = (rho_{i-1/2} + rho_{i+1/2})/h + k^2 rho_i h,  A_{i,i+1} = -rho_{i+1/2}/h,
    B_ii = g rho0'(y_i) h.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k}")
    h = grid.h
    y = grid.x[1:-1]
    rm = s.rho(grid.xmid)
    mass = s.rho(y) * h
    a_diag = (rm[:-1] + rm[1:]) / h + k * k * mass
    a_off = -rm[1:-1] / h
    pair = OperatorPair(int(k), grid, a_diag, a_off, s.g * s.drho(y) * h, mass)
    ab = np.zeros((2, a_diag.size))
    ab[0, 1:] = a_off
    ab[1] = a_diag
    try:
        cholesky_banded(ab)
    except LinAlgError as exc:
        raise ValueError("stiffness form is not positive definite; check profile and grid") from exc
    return pair


def recover_r(s: SteadyState, grid: Grid1D, phi, c: complex, eps: float) -> np.ndarray:
    """Density perturbation r = -rho0' phi / (eps U - c)."""
    if not c.imag > 0:
        raise ValueError(f"recover_r needs Im c > 0, got c = {c}")
    y = grid.x
    return -s.drho(y) * np.asarray(phi) / (eps * s.U(y) - c)


def _full(grid: Grid1D, interior: np.ndarray) -> np.ndarray:
    out = np.zeros(grid.n, dtype=interior.dtype)
    out[1:-1] = interior
    return out


def solve_hydrostatic(s: SteadyState, grid: Grid1D, k: int, tol: float = 1e-13,
                      maxiter: int = 20000) -> EigenSolution:
    """Most unstable hydrostatic mode for wavenumber k.

    Shifted inverse iteration x <- (sigma_up A - B)^{-1} A x with the
    Cholesky factor of the shifted form, where sigma_up = max(g rho0'/rho0)/k^2
    bounds the spectrum from above.  Returns a ``stable`` marker when rho0'
    is nowhere positive.
    """
    pair = assemble(s, grid, k)
    b = pair.b_diag
    if not np.any(b > 0.0):
        return EigenSolution(int(k), 0.0, 0j, None, None, 0.0, status="stable", sigma=0.0)
    shift = float(np.max(b / pair.mass)) / k**2
    chol = cholesky_banded(pair.upper_banded(shift))

    x = np.sqrt(np.maximum(b, 0.0))
    x /= math.sqrt(x @ pair.apply_A(x))
    best, since_best = math.inf, 0
    for it in range(1, maxiter + 1):
        x = cho_solve_banded((chol, False), pair.apply_A(x))
        x /= math.sqrt(x @ pair.apply_A(x))
        sigma = float(x @ (b * x))
        if sigma <= 0.0:
            break
        # residual of the eigen-equation in the units of F (divided by h)
        res = float(np.linalg.norm(pair.apply_A(x) - b * x / sigma) / np.linalg.norm(x)) / grid.h
        if res < best * 0.999:
            best, since_best = res, 0
        else:
            since_best += 1
        if res <= tol or since_best >= 50:
            break
    if sigma > 0.0 and best > 1e-8:
        raise RuntimeError(f"inverse iteration stalled at residual {best:.3g} for k={k}")
    if sigma <= 0.0:
        return EigenSolution(int(k), 0.0, 0j, None, None, 0.0, status="stable", sigma=sigma, iterations=it)

    second = _second_sigma(pair, chol, x)
    if second is not None and abs(sigma - second) < 1e-8 * abs(sigma):
        warnings.warn(f"largest eigenvalue for k={k} is nearly multiple ({sigma!r} vs {second!r})",
                      RuntimeWarning, stacklevel=2)

    phi = _full(grid, x)
    phi /= _norm(grid, phi)
    if phi[np.argmax(np.abs(phi))] < 0:
        phi = -phi
    lam = k * math.sqrt(sigma)
    c = 1j * lam / k
    phi = phi.astype(complex)
    sol = EigenSolution(int(k), 0.0, c, phi, recover_r(s, grid, phi, c, 0.0), 0.0, sigma=sigma, iterations=it)
    sol.residual = residual_norm(s, grid, k, 0.0, c, phi)
    sol.info["second_sigma"] = second
    return sol


def _second_sigma(pair: OperatorPair, chol, x1, iters: int = 300):
    """Next eigenvalue by inverse iteration deflated against x1 (A-orthogonal)."""
    Ax1 = pair.apply_A(x1)
    rng = np.random.default_rng(12345)
    y = rng.standard_normal(x1.size)
    sigma = None
    for _ in range(iters):
        y -= (y @ Ax1) * x1
        y = cho_solve_banded((chol, False), pair.apply_A(y))
        y -= (y @ Ax1) * x1
        y /= math.sqrt(y @ pair.apply_A(y))
        new = float(y @ (pair.b_diag * y))
        if sigma is not None and abs(new - sigma) <= 1e-14 * max(abs(new), 1e-300):
            sigma = new
            break
        sigma = new
    return sigma


def lambda_sequence(s: SteadyState, grid: Grid1D, k_max: int | None = None, ks=None):
    """(k, lambda_k) for k = 1..k_max, or for the explicit list ``ks``.

    Stable wavenumbers are reported with lambda_k = 0.
    """
    if ks is None:
        if k_max is None or k_max < 1:
            raise ValueError("give k_max >= 1 or an explicit list of wavenumbers")
        ks = range(1, int(k_max) + 1)
    out = []
    for k in ks:
        sol = solve_hydrostatic(s, grid, int(k))
        out.append((int(k), 0.0 if sol.stable else sol.lam.real))
    return out


def relabel_check(s: SteadyState, grid: Grid1D) -> tuple[float, float, float]:
    """Compare Lambda^2, the k -> infinity limit of the hydrostatic quotient, with mu^2.

    For a test function concentrated at one node the quotient k^2 (B phi, phi)/(A phi, phi)
    tends to B_ii / M_ii = g rho0'/rho0 there, so Lambda^2 is the maximum of
    that ratio over the grid, refined between nodes.  mu is the closed-form
    exponent of the same profile with U removed.
    """
    s0 = s.without_shear()
    pair = assemble(s0, grid, 1)
    ratio = pair.b_diag / pair.mass
    if np.max(ratio) <= 0.0:
        lam2 = 0.0
    else:
        lam2 = max(float(np.max(ratio)), max_buoyancy(s0, grid)[1])
    mu2 = mu_formula(s0, grid) ** 2
    return lam2, mu2, abs(lam2 - mu2)


class _Operator:
    """Profile arrays and the assembled form for repeated F evaluations."""

    def __init__(self, s: SteadyState, grid: Grid1D, k: int):
        self.grid = grid
        self.k = int(k)
        self.pair = assemble(s, grid, k)
        y = grid.x[1:-1]
        self.U = s.U(y)
        self.shear = s.drho(y) * s.dU(y) + s.rho(y) * s.d2U(y)
        self.buoy = s.g * s.drho(y)

    def _den(self, eps, c):
        if not c.imag > 0:
            raise ValueError(f"F needs Im c > 0, got c = {c}")
        return eps * self.U - c

    def F(self, eps, c, phi):
        den = self._den(eps, c)
        x = np.asarray(phi, dtype=complex)[1:-1]
        out = self.pair.apply_A(x) / self.grid.h + (eps * self.shear / den + self.buoy / den**2) * x
        return _full(self.grid, out)

    def jacobian(self, eps, c, phi):
        den = self._den(eps, c)
        h = self.grid.h
        diag = self.pair.a_diag / h + eps * self.shear / den + self.buoy / den**2
        off = (self.pair.a_off / h).astype(complex)
        Dw = sp.diags([off, diag, off], [-1, 0, 1], format="csc")
        x = np.asarray(phi, dtype=complex)[1:-1]
        Dc = _full(self.grid, (eps * self.shear / den**2 + 2.0 * self.buoy / den**3) * x)
        return Dw, Dc

    def residual(self, eps, c, phi):
        return _norm(self.grid, self.F(eps, c, phi)) / _norm(self.grid, phi)


def residual_F(s: SteadyState, grid: Grid1D, k: int, eps: float, c: complex, phi) -> np.ndarray:
    """Pointwise value of F(eps, c, phi) on the nodes (zero at the walls)."""
    if not c.imag > 0:
        raise ValueError(f"residual_F needs Im c > 0, got c = {c}")
    return _Operator(s, grid, k).F(eps, c, phi)


def residual_norm(s: SteadyState, grid: Grid1D, k: int, eps: float, c: complex, phi) -> float:
    """Discrete L2 norm of F relative to the L2 norm of phi."""
    return _norm(grid, residual_F(s, grid, k, eps, c, phi)) / _norm(grid, phi)


def jacobian(s: SteadyState, grid: Grid1D, k: int, eps: float, c: complex, phi):
    """Derivatives of F: (D_w F as sparse interior matrix, D_c F as full grid function)."""
    if not c.imag > 0:
        raise ValueError(f"jacobian needs Im c > 0, got c = {c}")
    return _Operator(s, grid, k).jacobian(eps, c, phi)


def _newton(op: _Operator, eps, c, phi, phi_k, tol, accept, maxiter=25):
    """Bordered Newton for F(eps, c, phi) = 0 with <phi - phi_k, phi_k> = 0.

    Stops when the relative residual is below ``tol``, or when it stagnates
    at a level below ``accept`` (the round-off floor of fine grids).
    Returns (c, phi, residual) or None when the iteration fails.
    """
    grid = op.grid
    m = grid.n - 2
    row = sp.csc_matrix(np.real(phi_k[1:-1]).reshape(1, -1).astype(complex))
    prev = None
    for _ in range(maxiter + 1):
        if not c.imag > 0:
            return None
        F = op.F(eps, c, phi)
        res = _norm(grid, F) / _norm(grid, phi)
        if not np.isfinite(res):
            return None
        if res <= tol or (prev is not None and res > 0.5 * prev and res <= accept):
            return c, phi, res
        if prev is not None and res > 1e3 * prev:
            return None
        prev = res
        Dw, Dc = op.jacobian(eps, c, phi)
        J = sp.bmat([[Dw, sp.csc_matrix(Dc[1:-1].reshape(-1, 1))], [row, None]], format="csc")
        w = phi - phi_k
        rhs = np.concatenate([-F[1:-1], [-(np.real(phi_k[1:-1]) @ w[1:-1])]])
        try:
            delta = splu(J, permc_spec="NATURAL", diag_pivot_thresh=0.1).solve(rhs)
        except RuntimeError:
            return None
        phi = phi.copy()
        phi[1:-1] += delta[:m]
        c = complex(c + delta[m])
    return None


def continue_in_eps(s: SteadyState, grid: Grid1D, k: int, eps_target: float, d_eps: float,
                    tol: float = 1e-12, accept: float = 1e-10, max_halvings: int = 6,
                    threshold: float = 1e-8) -> list[EigenSolution]:
    """Follow the most unstable mode from eps = 0 to ``eps_target``.

    Each step uses the previous solution as predictor and bordered Newton
    as corrector; a failed step is retried with half the increment, at most
    ``max_halvings`` times.  Newton stops at relative residual ``tol``, or
    at a stagnating residual below ``accept``.  The path stops early with status
    ``stability-threshold`` once Im c drops below ``threshold``.
    """
    if not d_eps > 0:
        raise ValueError(f"d_eps must be positive, got {d_eps}")
    sol0 = solve_hydrostatic(s, grid, k)
    if sol0.stable:
        raise ValueError("continuation needs an unstable hydrostatic mode")
    phi_k = sol0.phi
    path = [sol0]
    if eps_target == 0:
        return path
    direction = math.copysign(1.0, eps_target)
    op = _Operator(s, grid, k)
    eps, c, phi = 0.0, sol0.c, sol0.phi
    while abs(eps) < abs(eps_target):
        step = d_eps
        for _ in range(max_halvings + 1):
            e_next = eps + direction * step
            if abs(e_next) >= abs(eps_target) - 1e-12 * d_eps:
                e_next = float(eps_target)
            out = _newton(op, e_next, c, phi, phi_k, tol, accept)
            if out is not None:
                break
            step *= 0.5
        else:
            raise ContinuationError(f"Newton failed at eps = {eps + direction * step * 2:.6g} "
                                    f"after {max_halvings} halvings")
        eps = e_next
        c, phi, res = out
        sol = EigenSolution(int(k), eps, c, phi, recover_r(s, grid, phi, c, eps), res)
        path.append(sol)
        if c.imag < threshold:
            sol.status = "stability-threshold"
            break
    return path


def wronskian_drift(s: SteadyState, grid: Grid1D, k: int, c: complex, eps: float,
                    rtol: float = 1e-12, atol: float = 1e-14) -> float:
    """Relative variation of rho0 W over [-L, L] for two solutions started at -L.

    The solutions of (rho0 phi')' = (k^2 rho0 + q) phi start from the
    decaying and growing exponentials at y = -L.  They are carried in the
    variables (phi, rho0 phi') and re-orthonormalized by QR on short
    segments; the accumulated det R restores the Wronskian of the original
    pair, so exponential growth does not destroy its relative accuracy.
    """
    y = grid.x
    den = eps * s.U(y) - c
    if c.imag == 0.0 and (np.any(den == 0.0) or np.any(np.sign(den.real[:-1]) != np.sign(den.real[1:]))):
        raise CriticalLayerError(f"eps U - c vanishes on the grid for c = {c}")

    def q(yy):
        d = eps * s.U(yy) - c
        return eps * (s.drho(yy) * s.dU(yy) + s.rho(yy) * s.d2U(yy)) / d + s.g * s.drho(yy) / d**2

    def rhs(yy, z):
        Z = z.reshape(2, 2)
        M = np.array([[0.0, 1.0 / s.rho(yy)], [k * k * s.rho(yy) + q(yy), 0.0]], dtype=complex)
        return (M @ Z).ravel()

    r0 = float(s.rho(-grid.L))
    Z = np.array([[1.0, 1.0], [k * r0, -k * r0]], dtype=complex)
    eval_pts = np.union1d(y, [0.0])
    seg = min(0.5, 0.5 / k)
    edges = np.append(np.arange(-grid.L, grid.L, seg), grid.L)
    logW = np.empty(eval_pts.size, dtype=complex)
    acc = 0j
    j = 0
    logW[0] = cmath.log(np.linalg.det(Z))
    j = 1
    for a, b in zip(edges[:-1], edges[1:]):
        pts = eval_pts[(eval_pts > a) & (eval_pts <= b)]
        t_eval = np.union1d(pts, [b])
        sol = solve_ivp(rhs, (a, b), Z.ravel(), method="DOP853", t_eval=t_eval, rtol=rtol, atol=atol)
        if not sol.success:
            raise RuntimeError(sol.message)
        for i, t in enumerate(sol.t):
            if j < eval_pts.size and np.isclose(t, eval_pts[j], rtol=0, atol=1e-13) and t > a:
                logW[j] = cmath.log(np.linalg.det(sol.y[:, i].reshape(2, 2))) + acc
                j += 1
        Zb = sol.y[:, -1].reshape(2, 2)
        Qm, R = np.linalg.qr(Zb)
        acc += cmath.log(R[0, 0] * R[1, 1])
        Z = Qm
    i0 = int(np.searchsorted(eval_pts, 0.0))
    return float(np.max(np.abs(np.expm1(logW[:j] - logW[i0]))))
