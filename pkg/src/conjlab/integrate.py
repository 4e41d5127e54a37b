"""Dormand-Prince 5(4) with quartic dense output, and a fixed-step RK4.

States may carry leading batch axes: ``y0`` has shape ``(..., n)`` and the
right-hand side is called with arrays of that shape.  A single step size is
shared by the whole batch; the error norm is the RMS over the last axis,
maximised over the batch.  A ``retire(y, f)`` callback may return a boolean
mask over the batch; masked rows are filled with NaN from then on and no
longer steer the step size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# fourth-order minus fifth-order weights, seven stages (last is FSAL)
E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# Shampine's quartic continuous extension
P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY, MIN_FACTOR, MAX_FACTOR = 0.9, 0.2, 10.0


class StepSizeUnderflow(RuntimeError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow at t={t!r} (h={h:.3e})")
        self.t = t
        self.h = h


@dataclass
class DenseOutput:
    """Piecewise quartic interpolant over accepted steps."""

    t: np.ndarray       # (K+1,) step nodes
    y: np.ndarray       # (K+1, ...) node values
    coef: np.ndarray    # (K, ..., 4) so that y(t_k + th h) = y_k + coef_k @ [th, th^2, th^3, th^4]

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        if np.any(tt < self.t[0] - 1e-12 * max(1.0, abs(self.t[0]))) or np.any(
            tt > self.t[-1] + 1e-12 * max(1.0, abs(self.t[-1]))
        ):
            raise ValueError(f"time outside [{self.t[0]}, {self.t[-1]}]")
        k = np.clip(np.searchsorted(self.t, tt, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[k + 1] - self.t[k]
        th = (tt - self.t[k]) / h
        powers = np.stack([th, th**2, th**3, th**4], axis=-1)
        extra = self.y.ndim - 1
        powers = powers.reshape(powers.shape[:1] + (1,) * extra + (4,))
        out = self.y[k] + np.sum(self.coef[k] * powers, axis=-1)
        return out[0] if scalar else out


@dataclass
class Solution:
    t: np.ndarray
    y: np.ndarray
    t_eval: np.ndarray | None
    y_eval: np.ndarray | None
    dense: DenseOutput | None
    nfev: int
    rtol: float
    atol: float


def _initial_step(fun, t0, y0, f0, rtol, atol, span) -> float:
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.sqrt(np.mean((y0 / scale) ** 2, axis=-1)))
    d1 = np.max(np.sqrt(np.mean((f0 / scale) ** 2, axis=-1)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = fun(t0 + h0, y0 + h0 * f0)
    d2 = np.max(np.sqrt(np.mean(((f1 - f0) / scale) ** 2, axis=-1))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span)


def dopri5(fun, t0: float, y0, t1: float, *, rtol: float = 1e-10, atol: float = 1e-12,
           t_eval=None, dense: bool = True, max_steps: int = 1_000_000,
           retire=None) -> Solution:
    """Integrate ``y' = fun(t, y)`` from ``t0`` to ``t1 > t0``."""
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    y = np.array(y0, dtype=float)
    t = float(t0)
    span = t1 - t0
    if t_eval is not None:
        t_eval = np.asarray(t_eval, float)
        if np.any(np.diff(t_eval) < 0) or t_eval[0] < t0 or t_eval[-1] > t1:
            raise ValueError("t_eval must be sorted and inside [t0, t1]")
        y_eval = np.empty((len(t_eval),) + y.shape)
        n_done = 0
        while n_done < len(t_eval) and t_eval[n_done] == t0:
            y_eval[n_done] = y
            n_done += 1
    else:
        y_eval = None
    dead = np.zeros(y.shape[:-1], bool)
    f = fun(t, y)
    nfev = 1
    h = _initial_step(fun, t, y, f, rtol, atol, span)
    nfev += 1
    ts, ys, coefs = [t], [y], []
    K = np.empty((7,) + y.shape)
    steps = 0
    while t < t1:
        steps += 1
        if steps > max_steps:
            raise RuntimeError(f"max_steps exceeded at t={t}")
        min_h = 16 * np.spacing(t) if t else 1e-300
        if h < min_h:
            raise StepSizeUnderflow(t, h)
        if t + h >= t1 or t + 1.01 * h >= t1:
            h = t1 - t
        rejected = False
        while True:
            K[0] = f
            for s in range(1, 6):
                dy = sum(a * K[j] for j, a in enumerate(A[s]) if a)
                K[s] = fun(t + C[s] * h, y + h * dy)
            y_new = y + h * np.tensordot(B, K[:6], axes=1)
            f_new = fun(t + h, y_new)
            K[6] = f_new
            nfev += 6
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err_vec = h * np.tensordot(E, K, axes=1) / scale
            row_err = np.sqrt(np.mean(err_vec**2, axis=-1))
            if dead.any():
                row_err = np.where(dead, 0.0, row_err)
            err = float(np.max(row_err))
            if not np.isfinite(err):
                err = 1e10
            if err <= 1.0:
                factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, SAFETY * err ** -0.2)
                if rejected:
                    factor = min(1.0, factor)
                break
            h *= max(MIN_FACTOR, SAFETY * err ** -0.2)
            rejected = True
            if h < min_h:
                raise StepSizeUnderflow(t, h)
        t_new = t1 if t + h >= t1 else t + h
        coef = h * np.moveaxis(np.tensordot(P.T, K, axes=(1, 0)), 0, -1)
        if y_eval is not None:
            while n_done < len(t_eval) and t_eval[n_done] <= t_new:
                th = (t_eval[n_done] - t) / h
                y_eval[n_done] = y + coef @ np.array([th, th**2, th**3, th**4])
                n_done += 1
        if dense:
            coefs.append(coef)
            ts.append(t_new)
            ys.append(y_new)
        t, y, f = t_new, y_new, f_new
        if retire is not None and y.ndim > 1:
            with np.errstate(invalid="ignore"):
                gone = ~dead & np.asarray(retire(y, f), bool)
            if gone.any():
                dead |= gone
                y = y.copy()
                y[dead] = np.nan
                f = np.where(dead[..., None], np.nan, f)
        h *= factor
    if not dense:
        ts.append(t)
        ys.append(y)
    t_arr = np.array(ts)
    y_arr = np.stack(ys)
    dense_out = DenseOutput(t_arr, y_arr, np.stack(coefs)) if dense else None
    return Solution(t_arr, y_arr, t_eval, y_eval, dense_out, nfev, rtol, atol)


def rk4(fun, t0: float, y0, t1: float, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Classical fixed-step RK4; returns node times and states."""
    h = (t1 - t0) / n_steps
    y = np.array(y0, dtype=float)
    ts = t0 + h * np.arange(n_steps + 1)
    out = [y]
    for k in range(n_steps):
        t = ts[k]
        k1 = fun(t, y)
        k2 = fun(t + h / 2, y + h / 2 * k1)
        k3 = fun(t + h / 2, y + h / 2 * k2)
        k4 = fun(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(y)
    return ts, np.stack(out)
