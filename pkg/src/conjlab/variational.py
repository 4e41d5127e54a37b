"""Linearised flow along a base solution and conjugate-point detection.

The flow matrix ``M(t)`` is the derivative of ``q(t)`` with respect to the
initial velocity; columns are Jacobi fields with ``xi(a) = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import DEFAULT_TOL, Trajectory, tolerances
from .geometry import jacobi_coefficients
from .integrate import DenseOutput, dopri5

GRID_POINTS = 2048
BISECT_TOL = 1e-10
RANK_TOL = 1e-7


class GridTooCoarse(RuntimeError):
    pass


def flow_rhs(system):
    """Right-hand side on (..., 24) = (q, v, vec M, vec Mdot)."""

    def fun(t, y):
        q, v = y[..., 0:3], y[..., 3:6]
        m = y[..., 6:15].reshape(y.shape[:-1] + (3, 3))
        md = y[..., 15:24].reshape(y.shape[:-1] + (3, 3))
        aq, av = system.acceleration_jacobian(q, v)
        mdd = aq @ m + av @ md
        return np.concatenate(
            [v, system.acceleration(q, v), md.reshape(y.shape[:-1] + (9,)),
             mdd.reshape(y.shape[:-1] + (9,))], axis=-1)

    return fun


@dataclass(frozen=True)
class VariationalFlow:
    dense: DenseOutput
    tol: float

    @property
    def base(self) -> Trajectory:
        d = self.dense
        return Trajectory(DenseOutput(d.t, d.y[:, :6], d.coef[:, :6]), self.tol)

    @property
    def interval(self) -> tuple[float, float]:
        return float(self.dense.t[0]), float(self.dense.t[-1])

    def M(self, t) -> np.ndarray:
        y = self.dense(t)
        return y[..., 6:15].reshape(y.shape[:-1] + (3, 3))

    def Mdot(self, t) -> np.ndarray:
        y = self.dense(t)
        return y[..., 15:24].reshape(y.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class ConjugatePoint:
    t_star: float
    multiplicity: int
    position: tuple[float, float, float]


def variational_flow(system, q0, v0, interval, tol: float = DEFAULT_TOL) -> VariationalFlow:
    a, b = interval
    rtol, atol = tolerances(tol)
    y0 = np.concatenate([np.asarray(q0, float), np.asarray(v0, float),
                         np.zeros(9), np.eye(3).ravel()])
    sol = dopri5(flow_rhs(system), a, y0, b, rtol=rtol, atol=atol)
    return VariationalFlow(sol.dense, tol)


def jacobi_flow(system, base: Trajectory, tol: float = DEFAULT_TOL) -> Callable:
    """Flow of ``xi'' + A(t) xi = 0`` with A from the geometric Jacobi operator.

    Returns a vectorised ``t -> M(t)``.
    """
    a, b = base.interval
    rtol, atol = tolerances(tol)

    def fun(t, y):
        A = jacobi_coefficients(system, base, t)
        m, md = y[:9].reshape(3, 3), y[9:].reshape(3, 3)
        return np.concatenate([md.ravel(), (-A @ m).ravel()])

    y0 = np.concatenate([np.zeros(9), np.eye(3).ravel()])
    sol = dopri5(fun, a, y0, b, rtol=rtol, atol=atol)
    return lambda t: sol.dense(t)[..., :9].reshape(np.shape(t) + (3, 3))


def _scaled_smin(m: np.ndarray) -> np.ndarray:
    s = np.linalg.svd(m, compute_uv=False)
    return s[..., -1] / np.maximum(s[..., 0], 1e-300)


def _multiplicity(m: np.ndarray) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s <= RANK_TOL * s[0]))


def _bisect(f, lo: float, hi: float, flo: float) -> float:
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _golden_min(f, lo: float, hi: float, tol: float = 1e-12) -> tuple[float, float]:
    # scipy's bounded Brent stops at sqrt(eps)*|x|, too coarse for t* ~ pi at 1e-8
    inv = (np.sqrt(5.0) - 1) / 2
    c, d = hi - inv * (hi - lo), lo + inv * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - inv * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv * (hi - lo)
            fd = f(d)
    x = 0.5 * (lo + hi)
    return x, f(x)


def _scan(M_of_t, a: float, b: float, n: int) -> list[float]:
    ts = a + (b - a) * np.arange(1, n) / n
    ms = M_of_t(ts)
    det = np.linalg.det(ms)
    smin = _scaled_smin(ms)
    det_f = lambda t: float(np.linalg.det(M_of_t(t)))
    smin_f = lambda t: float(_scaled_smin(M_of_t(t)))
    roots: list[float] = []
    brackets = np.flatnonzero(np.sign(det[:-1]) * np.sign(det[1:]) < 0)
    for k in brackets:
        roots.append(_bisect(det_f, ts[k], ts[k + 1], det[k]))
    exact = np.flatnonzero(det == 0)
    roots.extend(float(ts[k]) for k in exact)
    # even-order zeros of det do not change sign; catch them as minima of the
    # scaled smallest singular value, which has a linear (V-shaped) contact
    for k in range(1, len(ts) - 1):
        if smin[k] < 0.05 and smin[k] < smin[k - 1] and smin[k] <= smin[k + 1]:
            x, fx = _golden_min(smin_f, ts[k - 1], ts[k + 1])
            if fx <= RANK_TOL:
                roots.append(float(x))
    roots.sort()
    merged: list[float] = []
    spacing = (b - a) / n
    for r in roots:
        if merged and r - merged[-1] < 2 * spacing:
            if r - merged[-1] > 1e-8:
                raise GridTooCoarse(f"distinct zeros {merged[-1]!r}, {r!r} within one grid cell")
            continue
        merged.append(r)
    return merged


def detect_conjugates(M_of_t: Callable, interval, position_of_t: Callable | None = None,
                      n: int = GRID_POINTS) -> list[ConjugatePoint]:
    """Zeros of det M on the open interval, with kernel dimension."""
    a, b = interval
    try:
        roots = _scan(M_of_t, a, b, n)
    except GridTooCoarse:
        roots = _scan(M_of_t, a, b, 8 * n)
    out = []
    for r in roots:
        mult = _multiplicity(M_of_t(r))
        if mult == 0:
            continue
        pos = tuple(float(p) for p in position_of_t(r)) if position_of_t else (float("nan"),) * 3
        out.append(ConjugatePoint(float(r), mult, pos))
    return out


def conjugate_points(system, q0, v0, interval, tol: float = DEFAULT_TOL,
                     flow: VariationalFlow | None = None) -> list[ConjugatePoint]:
    flow = flow or variational_flow(system, q0, v0, interval, tol)
    base = flow.base
    return detect_conjugates(flow.M, flow.interval, base.position)
