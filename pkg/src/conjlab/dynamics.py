"""Initial value problems for p-geodesics and conformal geodesics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from .fields import ScalarField
from .geometry import ConformalMetric, MechanicalSystem
from .integrate import DenseOutput, dopri5

DEFAULT_TOL = 1e-12
PANELS_PER_2PI = 2048


class EnergyMismatch(ValueError):
    pass


def tolerances(tol: float) -> tuple[float, float]:
    """(rtol, atol) used for a requested tolerance; tol=1e-12 gives (1e-10, 1e-12)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    return min(100.0 * tol, 1e-3), tol


def state_rhs(system):
    """First-order right-hand side on states (..., 6) = (q, v)."""

    def fun(t, y):
        q, v = y[..., :3], y[..., 3:]
        return np.concatenate([v, system.acceleration(q, v)], axis=-1)

    return fun


@dataclass(frozen=True)
class Trajectory:
    """Integrated curve on [a, b] with dense (q, v) output."""

    dense: DenseOutput
    tol: float

    @property
    def interval(self) -> tuple[float, float]:
        return float(self.dense.t[0]), float(self.dense.t[-1])

    @property
    def t(self) -> np.ndarray:
        return self.dense.t

    @property
    def q(self) -> np.ndarray:
        return self.dense.y[:, :3]

    @property
    def v(self) -> np.ndarray:
        return self.dense.y[:, 3:6]

    def state(self, t):
        y = self.dense(t)
        return y[..., :3], y[..., 3:6]

    def position(self, t):
        return self.dense(t)[..., :3]

    def velocity(self, t):
        return self.dense(t)[..., 3:6]

    def uniform(self, n_panels: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Samples on a uniform grid suitable for composite Simpson quadrature."""
        a, b = self.interval
        n = n_panels or simpson_panels(b - a)
        ts = np.linspace(a, b, n + 1)
        q, v = self.state(ts)
        return ts, q, v


def simpson_panels(length: float) -> int:
    n = max(PANELS_PER_2PI, math.ceil(PANELS_PER_2PI * abs(length) / (2 * math.pi)))
    return n + (n % 2)


def _integrate(system, q0, v0, interval, tol) -> Trajectory:
    a, b = interval
    rtol, atol = tolerances(tol)
    y0 = np.concatenate([np.asarray(q0, float), np.asarray(v0, float)])
    sol = dopri5(state_rhs(system), a, y0, b, rtol=rtol, atol=atol)
    return Trajectory(sol.dense, tol)


def integrate_pgeodesic(sys: MechanicalSystem, q0, v0, interval, tol: float = DEFAULT_TOL) -> Trajectory:
    if not isinstance(sys, MechanicalSystem):
        raise TypeError("expected a MechanicalSystem")
    return _integrate(sys, q0, v0, interval, tol)


def integrate_geodesic(metric: ConformalMetric, q0, v0, interval, tol: float = DEFAULT_TOL) -> Trajectory:
    if not isinstance(metric, ConformalMetric):
        raise TypeError("expected a ConformalMetric")
    return _integrate(metric, q0, v0, interval, tol)


def integrate(system, q0, v0, interval, tol: float = DEFAULT_TOL) -> Trajectory:
    return _integrate(system, q0, v0, interval, tol)


def ode_residual(system, traj: Trajectory) -> float:
    """Max over step midpoints of |d/dt(q, v) - rhs(q, v)| from the interpolant.

    The derivative is taken by a five-point stencil at a spacing well inside
    each step, so this measures the dense output, not the stencil.
    """
    t = traj.t
    mids = 0.5 * (t[1:] + t[:-1])
    h = 1e-3 * np.min(np.diff(t))
    stencil = np.array([-2, -1, 1, 2]) * h
    ys = np.stack([traj.dense(mids + s) for s in stencil])
    dy = (ys[0] - 8 * ys[1] + 8 * ys[2] - ys[3]) / (12 * h)
    y = traj.dense(mids)
    return float(np.max(np.abs(dy - state_rhs(system)(mids, y))))


def mechanical_energy(sys: MechanicalSystem, traj: Trajectory, t) -> np.ndarray:
    q, v = traj.state(t)
    return sys.energy_density(q, v)


def energy(system, traj: Trajectory) -> float:
    """Energy functional by composite Simpson on the dense output.

    Conformal metric: 1/2 int exp(2 rho) g_flat(q', q') dt.
    Mechanical system: 1/2 int g(q', q') dt - int V(q) dt.
    """
    ts, q, v = traj.uniform()
    if isinstance(system, ConformalMetric):
        dens = 0.5 * system.inner(q, v, v)
    elif isinstance(system, MechanicalSystem):
        dens = 0.5 * system.signature.inner(v, v) - system.potential.at(q)
    else:
        raise TypeError(f"unsupported system type {type(system).__name__}")
    return float(simpson(dens, x=ts))


def residual_pgeodesic(sys: MechanicalSystem, q, qdd) -> float:
    """sup |q'' + grad V(q)| over samples of an analytic curve."""
    q, qdd = np.asarray(q, float), np.asarray(qdd, float)
    return float(np.max(np.abs(qdd - sys.acceleration(q, np.zeros_like(q)))))


def mechanical_from_conformal(metric: ConformalMetric, c: float = 0.0) -> MechanicalSystem:
    """System (flat, V) with (c - V) g_flat = exp(2 rho) g_flat."""
    return MechanicalSystem(metric.signature, c - ScalarField.exp2(metric.rho.as_poly()))


@dataclass(frozen=True)
class CorrespondenceReport:
    s: np.ndarray              # new parameter at the samples
    positions: np.ndarray      # sigma(s)
    velocities: np.ndarray     # d sigma / ds
    max_residual: float        # sup |sigma'' + Gamma(sigma', sigma')|
    time_map: np.ndarray       # (n, 2) columns t, s
    energy_error: float

    def position_at_time(self, t: float) -> np.ndarray:
        tm = self.time_map
        return np.array([np.interp(t, tm[:, 0], self.positions[:, i]) for i in range(3)])


def verify_correspondence(metric: ConformalMetric, c: float, ptraj: Trajectory,
                          tol: float = 1e-8) -> CorrespondenceReport:
    """Reparametrise a p-geodesic of energy c into a geodesic of exp(2 rho) g_flat.

    ds/dt = sqrt(2) (c - V(q(t))), which gives unit speed for the rescaled metric.
    """
    sys = mechanical_from_conformal(metric, c)
    ts, q, v = ptraj.uniform()
    e = sys.energy_density(q, v)
    energy_error = float(np.max(np.abs(e - c)))
    if energy_error > tol:
        raise EnergyMismatch(f"mechanical energy differs from c={c} by {energy_error:.3e}")
    k = math.sqrt(2.0)
    weight = c - sys.potential.at(q)
    sdot = k * weight
    if np.any(sdot <= 0):
        raise ValueError("c - V must stay positive along the curve")
    grad_v = np.stack([g.at(q) for g in sys.grad_fields], axis=-1)
    sddot = -k * np.sum(grad_v * v, axis=-1)
    acc = sys.acceleration(q, v)
    sig1 = v / sdot[:, None]
    sig2 = (acc * sdot[:, None] - v * sddot[:, None]) / sdot[:, None] ** 3
    res = sig2 - metric.acceleration(q, sig1)
    s = cumulative_simpson(sdot, x=ts, initial=0.0)
    return CorrespondenceReport(
        s=s, positions=q, velocities=sig1, max_residual=float(np.max(np.abs(res))),
        time_map=np.column_stack([ts, s]), energy_error=energy_error,
    )
