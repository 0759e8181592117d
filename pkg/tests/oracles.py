"""Independent reference computations used only by the tests."""

import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq


def shoot_c(s, k, eps, c0, L=20.0, rtol=1e-13, atol=1e-300, iters=30):
    """Phase speed of the eps-Rayleigh equation by two-sided shooting.

    Solutions decaying at -L and +L (exponential seeds) are integrated to
    y = 0 and their log-derivative mismatch is driven to zero by the
    secant method in the complex plane.
    """

    def q(y, c):
        d = eps * s.U(y) - c
        return eps * (s.drho(y) * s.dU(y) + s.rho(y) * s.d2U(y)) / d + s.g * s.drho(y) / d**2

    def half(c, y0):
        sign = 1.0 if y0 < 0 else -1.0

        def f(y, z):
            return [z[1] / s.rho(y), (k * k * s.rho(y) + q(y, c)) * z[0]]

        z0 = np.array([1.0, sign * k * float(s.rho(y0))], dtype=complex)
        sol = solve_ivp(f, (y0, 0.0), z0, method="DOP853", rtol=rtol, atol=atol)
        return sol.y[1, -1] / sol.y[0, -1]

    def mismatch(c):
        return half(c, -L) - half(c, L)

    c_prev, c = c0, c0 * (1 + 1e-6) + 1e-7j
    m_prev = mismatch(c_prev)
    for _ in range(iters):
        m = mismatch(c)
        if m == m_prev:
            break
        c_new = c - m * (c - c_prev) / (m - m_prev)
        c_prev, m_prev, c = c, m, c_new
        if abs(c - c_prev) < 1e-14:
            break
    return c


def hydrostatic_lambda_shoot(s, k, lam_lo, lam_hi, L=20.0):
    """Real growth rate of the hydrostatic problem by bracketing shooting."""

    def mis(lam):
        def f(y, u):
            return [u[1] / s.rho(y), k**2 * s.rho(y) * u[0] - k**2 * s.g * s.drho(y) / lam**2 * u[0]]

        a = solve_ivp(f, (-L, 0), [1.0, k * s.rho(-L)], rtol=1e-12, atol=1e-300, method="DOP853").y[:, -1]
        b = solve_ivp(f, (L, 0), [1.0, -k * s.rho(L)], rtol=1e-12, atol=1e-300, method="DOP853").y[:, -1]
        return a[1] / a[0] - b[1] / b[0]

    return brentq(mis, lam_lo, lam_hi, xtol=1e-14)


def max_ratio_scan(f, a, b, n=200001):
    """Brute-force maximum of f on a fine uniform sample."""
    y = np.linspace(a, b, n)
    v = f(y)
    i = int(np.argmax(v))
    return float(y[i]), float(v[i])
