"""Batched Dormand-Prince 5(4) for linear matrix ODEs Y' = A(t) Y.

Each batch member carries its own time, step size and error control, so
the trajectory of one member never depends on which other members share
the batch.  Large solutions are renormalized to unit Frobenius norm and
the discarded scale is accumulated in log form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
# difference between the 5th and embedded 4th order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

RESCALE_THRESHOLD = 1e100


class StepSizeUnderflow(RuntimeError):
    """Raised when the adaptive step collapses; carries the time reached."""

    def __init__(self, t_reached: float):
        super().__init__(f"step size underflow at t = {t_reached:.6g}")
        self.t_reached = t_reached


@dataclass
class BatchSolution:
    """Solutions at the requested output times.

    ``Y[j]`` has shape (N, m, m) and holds the renormalized matrices at
    ``times[j]``; the true solution is ``Y[j] * exp(log_scale[j])[:, None, None]``.
    """

    times: np.ndarray
    Y: np.ndarray
    log_scale: np.ndarray
    steps: np.ndarray
    rejected: np.ndarray
    error_estimate: np.ndarray


def _matmul(A, Y):
    # explicit contraction keeps per-member arithmetic independent of batch size
    return (A[:, :, :, None] * Y[:, None, :, :]).sum(axis=2)


def integrate_linear(coeff, Y0, times, rtol=1e-10, atol=1e-12, h0=1e-2, max_steps=10_000_000):
    """Integrate Y' = coeff(t, idx) Y for a batch of members.

    Parameters
    ----------
    coeff : callable
        ``coeff(t, idx)`` returns the (len(idx), m, m) coefficient matrices
        of members ``idx`` at their individual times ``t``.
    Y0 : ndarray, shape (N, m, m)
        Initial values.
    times : sequence of float
        Nondecreasing output times, all >= 0.  Integration starts at 0.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("output times must be nonnegative and nondecreasing")
    Y = np.array(Y0, dtype=float, copy=True)
    N = Y.shape[0]
    out = np.empty((len(times),) + Y.shape)
    out_log = np.empty((len(times), N))
    t = np.zeros(N)
    h = np.full(N, float(h0))
    logs = np.zeros(N)
    steps = np.zeros(N, dtype=np.int64)
    rejected = np.zeros(N, dtype=np.int64)
    err_acc = np.zeros(N)
    k1 = None
    all_idx = np.arange(N)
    total = 0

    for j, t_out in enumerate(times):
        while True:
            idx = all_idx[t < t_out]
            if idx.size == 0:
                break
            total += 1
            if total > max_steps:
                raise StepSizeUnderflow(float(t[idx].min()))
            ti = t[idx]
            hi = np.minimum(h[idx], t_out - ti)
            yi = Y[idx]
            if k1 is None or k1.shape[0] != N:
                k1 = np.empty_like(Y)
                k1[:] = _matmul(coeff(t, all_idx), Y)
            ks = [k1[idx]]
            hb = hi[:, None, None]
            for s in range(1, 7):
                acc = yi.copy()
                for q, a in enumerate(_A[s]):
                    if a != 0.0:
                        acc += hb * a * ks[q]
                if s == 6:
                    ynew = acc
                ks.append(_matmul(coeff(ti + _C[s] * hi, idx), acc))
            err = hb * sum(e * kk for e, kk in zip(_E, ks) if e != 0.0)
            scale = atol + rtol * np.maximum(np.abs(yi), np.abs(ynew))
            enorm = np.max(np.abs(err) / scale, axis=(1, 2))
            ok = enorm <= 1.0

            acc_idx = idx[ok]
            if acc_idx.size:
                yn = ynew[ok]
                t[acc_idx] = ti[ok] + hi[ok]
                # land exactly on the output time when the step was clipped to it
                t[acc_idx] = np.where(np.abs(t[acc_idx] - t_out) <= 1e-14 * max(1.0, t_out), t_out, t[acc_idx])
                steps[acc_idx] += 1
                err_acc[acc_idx] += np.max(np.abs(err[ok]), axis=(1, 2)) / np.maximum(
                    np.max(np.abs(yn), axis=(1, 2)), 1e-300)
                k7 = ks[6][ok]
                nrm = np.sqrt(np.sum(yn * yn, axis=(1, 2)))
                big = nrm > RESCALE_THRESHOLD
                if np.any(big):
                    yn[big] /= nrm[big, None, None]
                    k7[big] /= nrm[big, None, None]
                    logs[acc_idx[big]] += np.log(nrm[big])
                Y[acc_idx] = yn
                k1[acc_idx] = k7
            rejected[idx[~ok]] += 1

            fac = np.where(enorm == 0.0, 5.0, 0.9 * np.maximum(enorm, 1e-300) ** -0.2)
            fac = np.clip(fac, 0.2, 5.0)
            fac = np.where(ok, fac, np.minimum(fac, 1.0))
            # an accepted step that was clipped to an output time keeps the natural size
            h[idx] = np.where(ok & (hi < h[idx]), h[idx], hi * fac)
            tiny = h[idx] < 1e-14 * np.maximum(1.0, np.abs(t[idx]))
            if np.any(tiny):
                raise StepSizeUnderflow(float(t[idx][tiny].min()))
        out[j] = Y
        out_log[j] = logs
    return BatchSolution(times, out, out_log, steps, rejected, err_acc)
