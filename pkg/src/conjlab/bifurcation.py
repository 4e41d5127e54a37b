"""Shooting, branch tracing and integral certificates for axis solutions.

All systems here have a base solution along the z-axis, q(t) = (0, 0, c t).
Nearby solutions are parametrised by the transverse initial velocity
w = (x'(0), y'(0)); the miss map sends w to the transverse position at time
lambda.  Zeros of the miss map are solutions of the two-point problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .dynamics import DEFAULT_TOL, simpson_panels, state_rhs, tolerances
from .fields import ScalarField, X, Y, render
from .geometry import MechanicalSystem
from .integrate import StepSizeUnderflow, dopri5

TRIVIAL_RADIUS = 1e-3
COND_LIMIT = 1e8
FLAT_JACOBIAN = 1e-6
SHOOT_TOL = 1e-10
FD_STEP = 1e-6
MAX_HALVINGS = 20
MAX_STEP = 0.5
PLANE_TOL = 1e-10
RETURN_TOL = 1e-10
BLOWUP = 1e6
ESCAPE_FACTOR = 2.5
SCAN_ACCEL_CAP = 100.0


class PlaneNotInvariant(ValueError):
    pass


class NoReturnInWindow(ValueError):
    pass


# -- miss map ---------------------------------------------------------------

def _initial_states(q0, W, speed) -> np.ndarray:
    W = np.atleast_2d(np.asarray(W, float))
    y0 = np.empty((len(W), 6))
    y0[:, :3] = np.asarray(q0, float)
    y0[:, 3:5] = W
    y0[:, 5] = speed
    return y0


def _retire_rows(escape: float | None, cap: float = BLOWUP):
    def retire(y, f):
        big = ~(np.max(np.abs(f), axis=-1) <= cap) | ~(np.max(np.abs(y), axis=-1) <= BLOWUP)
        if escape is not None:
            big |= ~(np.hypot(y[..., 0], y[..., 1]) <= escape)
        return big
    return retire


def shoot_states(sys, q0, W, speed: float, lams, tol: float = DEFAULT_TOL, t0: float = 0.0,
                 escape: float | None = None, cap: float = BLOWUP):
    """States at every time in ``lams`` for every row of ``W``: shape (L, N, 6).

    Rows that blow up (state or acceleration above ``cap``), or whose
    transverse distance from the axis exceeds ``escape``, come back as NaN.
    """
    lams = np.atleast_1d(np.asarray(lams, float))
    order = np.argsort(lams)
    rtol, atol = tolerances(tol)
    y0 = _initial_states(q0, W, speed)
    sol = dopri5(state_rhs(sys), t0, y0, float(lams[order[-1]]), rtol=rtol, atol=atol,
                 t_eval=lams[order], dense=False, retire=_retire_rows(escape, cap))
    out = np.empty_like(sol.y_eval)
    out[order] = sol.y_eval
    return out


def _miss_rows(sys, q0, W, speed, row_lams, tol) -> np.ndarray:
    """Miss vectors (N, 2) where row i is shot to its own time row_lams[i].

    Rows whose solution blows up get an infinite miss; the batch is split
    until the offending rows are isolated.
    """
    W = np.atleast_2d(np.asarray(W, float))
    row_lams = np.asarray(row_lams, float)
    uniq, inv = np.unique(row_lams, return_inverse=True)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            states = shoot_states(sys, q0, W, speed, uniq, tol)
    except StepSizeUnderflow:
        if len(W) == 1:
            return np.full((1, 2), np.inf)
        half = len(W) // 2
        return np.concatenate([_miss_rows(sys, q0, W[:half], speed, row_lams[:half], tol),
                               _miss_rows(sys, q0, W[half:], speed, row_lams[half:], tol)])
    m = states[inv, np.arange(len(row_lams)), :2]
    return np.where(np.isnan(m), np.inf, m)


def miss_map(sys, q0, w, speed: float, lam: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Transverse position (x, y) at time ``lam`` for initial velocity (w, speed)."""
    w = np.asarray(w, float)
    if w.ndim == 1:
        return shoot_states(sys, q0, w[None], speed, lam, tol)[0, 0, :2]
    return shoot_states(sys, q0, w, speed, lam, tol)[0, :, :2]


# -- Newton shooting --------------------------------------------------------

@dataclass(frozen=True)
class ShootResult:
    w: np.ndarray
    status: str            # converged | singular-family | no-convergence
    miss: float
    iterations: int
    lam: float

    @property
    def trivial(self) -> bool:
        return self.status != "no-convergence" and float(np.hypot(*self.w)) <= TRIVIAL_RADIUS


def _jacobians(sys, q0, W, speed, lams, tol, h) -> np.ndarray:
    n = len(W)
    E = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    pts = (W[:, None, :] + E[None]).reshape(-1, 2)
    m = _miss_rows(sys, q0, pts, speed, np.repeat(lams, 4), tol).reshape(n, 4, 2)
    J = np.empty((n, 2, 2))
    with np.errstate(invalid="ignore"):
        J[:, :, 0] = (m[:, 0] - m[:, 1]) / (2 * h)
        J[:, :, 1] = (m[:, 2] - m[:, 3]) / (2 * h)
    return J


def _damped_newton(sys, q0, speed, lams, W, tol, max_iter, h, itol):
    n = len(W)
    W = W.copy()
    m = _miss_rows(sys, q0, W, speed, lams, itol)
    norm = np.linalg.norm(m, axis=1)
    done = norm <= tol
    failed = ~np.isfinite(norm)
    iters = np.zeros(n, int)
    for _ in range(max_iter):
        act = np.flatnonzero(~done & ~failed)
        if act.size == 0:
            break
        iters[act] += 1
        J = _jacobians(sys, q0, W[act], speed, lams[act], itol, h)
        bad = ~np.isfinite(J).all(axis=(1, 2))
        if bad.any():
            failed[act[bad]] = True
            act, J = act[~bad], J[~bad]
            if act.size == 0:
                break
        step = np.stack([np.linalg.lstsq(J[i], -m[a], rcond=1e-12)[0] for i, a in enumerate(act)])
        length = np.linalg.norm(step, axis=1)
        step *= np.minimum(1.0, MAX_STEP / np.maximum(length, 1e-300))[:, None]
        scale = np.ones(len(act))
        pending = np.arange(len(act))
        for _ in range(MAX_HALVINGS + 1):
            rows = act[pending]
            trial = W[rows] + scale[pending, None] * step[pending]
            mt = _miss_rows(sys, q0, trial, speed, lams[rows], itol)
            nt = np.linalg.norm(mt, axis=1)
            ok = nt < norm[rows]
            W[rows[ok]], m[rows[ok]], norm[rows[ok]] = trial[ok], mt[ok], nt[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            scale[pending] *= 0.5
        failed[act[pending]] = True
        done = norm <= tol
    return W, m, norm, done, iters


def _pinned_angle_solve(sys, q0, speed, lams, W0, tol, max_iter, h, itol):
    """Solve for the angle at fixed amplitude |w0| (the family direction is null)."""
    r = np.linalg.norm(W0, axis=1)
    th = np.arctan2(W0[:, 1], W0[:, 0])
    e = lambda a: np.column_stack([np.cos(a), np.sin(a)])
    m = _miss_rows(sys, q0, r[:, None] * e(th), speed, lams, itol)
    norm = np.linalg.norm(m, axis=1)
    done = norm <= tol
    failed = ~np.isfinite(norm)
    for _ in range(max_iter):
        act = np.flatnonzero(~done & ~failed)
        if act.size == 0:
            break
        dh = h / np.maximum(r[act], h)
        pts = np.concatenate([r[act, None] * e(th[act] + dh), r[act, None] * e(th[act] - dh)])
        mm = _miss_rows(sys, q0, pts, speed, np.concatenate([lams[act], lams[act]]), itol)
        with np.errstate(invalid="ignore"):
            jt = (mm[: len(act)] - mm[len(act):]) / (2 * dh[:, None])
        denom = np.sum(jt * jt, axis=1)
        step = -np.sum(jt * m[act], axis=1) / np.where(denom > 0, denom, np.inf)
        step = np.where(np.isfinite(step), step, 0.0)
        trial = th[act] + step
        mt = _miss_rows(sys, q0, r[act, None] * e(trial), speed, lams[act], itol)
        nt = np.linalg.norm(mt, axis=1)
        improve = nt < 0.99 * norm[act]
        keep = act[improve]
        th[keep], m[keep], norm[keep] = trial[improve], mt[improve], nt[improve]
        failed[act[~improve]] = True
        done = norm <= tol
    return r[:, None] * e(th), norm, done


def newton_shoot_many(sys, q0, lams, w_guesses, *, speed: float, tol: float = SHOOT_TOL,
                      max_iter: int = 60, h: float = FD_STEP,
                      itol: float = DEFAULT_TOL) -> list[ShootResult]:
    """Damped Newton on the miss map, one run per (lambda, guess) row.

    If the Jacobian at the converged point is singular (condition above
    COND_LIMIT or numerically zero), the root is not isolated to first order;
    the run is repeated at the guess amplitude, moving only in angle.  A root
    found that way is reported as ``singular-family``.
    """
    lams = np.asarray(lams, float)
    W0 = np.atleast_2d(np.asarray(w_guesses, float))
    lams = np.broadcast_to(lams, (len(W0),)).copy()
    W, m, norm, done, iters = _damped_newton(sys, q0, speed, lams, W0, tol, max_iter, h, itol)
    status = np.where(done, "converged", "no-convergence").astype(object)

    conv = np.flatnonzero(done)
    if conv.size:
        J = _jacobians(sys, q0, W[conv], speed, lams[conv], itol, h)
        s = np.linalg.svd(J, compute_uv=False)
        degenerate = (s[:, 0] <= FLAT_JACOBIAN) | (s[:, 1] <= s[:, 0] / COND_LIMIT)
        cand = conv[degenerate & (np.linalg.norm(W0[conv], axis=1) > TRIVIAL_RADIUS)]
        if cand.size:
            Wp, normp, donep = _pinned_angle_solve(sys, q0, speed, lams[cand], W0[cand], tol,
                                                   max_iter, h, itol)
            hit = cand[donep]
            W[hit], norm[hit] = Wp[donep], normp[donep]
            status[hit] = "singular-family"
    return [ShootResult(W[i].copy(), str(status[i]), float(norm[i]), int(iters[i]), float(lams[i]))
            for i in range(len(W0))]


def newton_shoot(sys, q0, lam: float, w_guess, *, speed: float, tol: float = SHOOT_TOL,
                 max_iter: int = 60) -> ShootResult:
    if tol <= 0:
        raise ValueError("tol must be positive")
    return newton_shoot_many(sys, q0, [lam], [w_guess], speed=speed, tol=tol, max_iter=max_iter)[0]


# -- branch tracing ---------------------------------------------------------

@dataclass(frozen=True)
class BranchPoint:
    alpha: float
    T_alpha: float
    w: tuple[float, float]


@dataclass(frozen=True)
class Branch:
    ray: tuple[float, float]
    points: tuple[BranchPoint, ...]

    @property
    def name(self) -> str:
        return ray_name(self.ray)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([p.alpha for p in self.points])

    @property
    def times(self) -> np.ndarray:
        return np.array([p.T_alpha for p in self.points])


def ray_name(u) -> str:
    u = tuple(float(c) for c in u)
    if u == (1.0, 0.0):
        return "x"
    if u == (0.0, 1.0):
        return "y"
    return f"angle{math.degrees(math.atan2(u[1], u[0])):.6g}"


def check_plane_invariant(sys, q0, u, speed: float, t_end: float, alpha: float,
                          tol: float = DEFAULT_TOL) -> float:
    """Max off-plane transverse displacement of a probe solution along ray u."""
    u = np.asarray(u, float) / np.linalg.norm(u)
    normal = np.array([-u[1], u[0]])
    rtol, atol = tolerances(tol)
    sol = dopri5(state_rhs(sys), 0.0, _initial_states(q0, alpha * u, speed)[0], t_end,
                 rtol=rtol, atol=atol)
    off = float(np.max(np.abs(sol.y[:, :2] @ normal)))
    if off > PLANE_TOL:
        raise PlaneNotInvariant(
            f"plane spanned by ray ({u[0]:.6g}, {u[1]:.6g}) and the axis is not invariant "
            f"(off-plane {off:.3e})")
    return off


def trace_branch(sys, q0, u, alphas, t_window, *, speed: float,
                 tol: float = DEFAULT_TOL) -> Branch:
    """First return time to the axis for initial velocity (alpha u, speed).

    Within an invariant plane each return time gives a solution of the
    two-point problem on [0, T_alpha]; their limit as alpha -> 0 is a
    conjugate parameter.
    """
    u = np.asarray(u, float) / np.linalg.norm(u)
    alphas = np.array(sorted((float(a) for a in alphas), reverse=True))
    if np.any(alphas <= 0) or len(set(alphas)) != len(alphas):
        raise ValueError("alphas must be distinct and positive")
    lo, hi = t_window
    check_plane_invariant(sys, q0, u, speed, hi, alphas[0], tol)
    rtol, atol = tolerances(tol)
    y0 = _initial_states(q0, alphas[:, None] * u, speed)
    sol = dopri5(state_rhs(sys), 0.0, y0, hi, rtol=rtol, atol=atol)
    grid = np.linspace(lo, hi, 2049)
    s = sol.dense(grid)[:, :, :2] @ u            # (grid, N)
    points = []
    for i, a in enumerate(alphas):
        change = np.flatnonzero(np.sign(s[:-1, i]) * np.sign(s[1:, i]) <= 0)
        change = change[grid[change] > 0]
        if change.size == 0:
            raise NoReturnInWindow(f"alpha={a}: no return to the axis in {t_window}")
        k = change[0]
        f = lambda t: float(sol.dense(t)[i, :2] @ u)
        t_lo, t_hi, f_lo = grid[k], grid[k + 1], s[k, i]
        if f_lo == 0.0:
            T = t_lo
        else:
            while t_hi - t_lo > RETURN_TOL:
                mid = 0.5 * (t_lo + t_hi)
                fm = f(mid)
                if np.sign(fm) == np.sign(f_lo):
                    t_lo, f_lo = mid, fm
                else:
                    t_hi = mid
            T = 0.5 * (t_lo + t_hi)
        w = alphas[i] * u
        points.append(BranchPoint(float(a), float(T), (float(w[0]), float(w[1]))))
    return Branch((float(u[0]), float(u[1])), tuple(points))


def branch_converges(branch: Branch, t_star: float, window: float = 0.05, min_points: int = 4) -> bool:
    """At least ``min_points`` return times within ``window`` of t_star, approaching it."""
    gaps = np.abs(branch.times - t_star)
    close = gaps <= window
    if close.sum() < min_points:
        return False
    g = gaps[close]
    return bool(np.all(np.diff(g) <= 1e-9))


# -- certificates -----------------------------------------------------------

CERTIFICATE_FORMS = {
    "mpp": (X**2 * Y**4 + X**4 * Y**2).as_poly(),
    "new": (X**4 + Y**4 + 6 * X**2 * Y**2).as_poly(),
}


@dataclass(frozen=True)
class Certificate:
    variant: str
    lam: float
    value: float
    integrand_min: float


def _positions(curve, ts):
    if hasattr(curve, "position"):
        return curve.position(ts)
    return np.asarray(curve(ts), float)


def certificate_integral(variant: str, traj, lam: float,
                         weight: ScalarField | None = None) -> Certificate:
    """Composite Simpson of weight * form(x, y) over [0, lam].

    ``traj`` is a Trajectory or any callable t -> positions (..., 3).
    """
    form = CERTIFICATE_FORMS[variant]
    ts = np.linspace(0.0, lam, simpson_panels(lam) + 1)
    q = _positions(traj, ts)
    dens = form(q[:, 0], q[:, 1], q[:, 2])
    if weight is not None:
        dens = dens * weight.at(q)
    return Certificate(variant, float(lam), float(simpson(dens, x=ts)), float(np.min(dens)))


def wronskian_density(sys: MechanicalSystem) -> ScalarField:
    """d/dt (y x' - x y') = y x'' - x y'' along solutions, as an exact field."""
    eps = sys.signature.eps
    ax = -eps[0] * sys.potential.partial(0)
    ay = -eps[1] * sys.potential.partial(1)
    return Y * ax - X * ay


@dataclass(frozen=True)
class CertificateAnalysis:
    density: str            # rendered exact density
    sign: int               # density = sign * weight * form, weight > 0
    form: str               # rendered polynomial form in (x, y)
    definite: bool          # form vanishes only at x = y = 0
    semidefinite: bool

    @property
    def certifies(self) -> bool:
        return self.definite


def analyse_certificate(sys: MechanicalSystem) -> CertificateAnalysis:
    """Decide whether the Wronskian identity excludes nontrivial solutions.

    Integrating the density between two zeros of (x, y) gives zero, so a
    density that is a positive weight times a positive definite form forces
    x = y = 0.
    """
    dens = wronskian_density(sys)
    groups = dens.groups
    if len(groups) != 1:
        return CertificateAnalysis(render(dens), 0, render(dens), False, False)
    (q, p), = groups.items()
    coeffs = [c for _, c in p.items()]
    sign = 1 if coeffs and all(c > 0 for c in coeffs) else -1 if coeffs and all(c < 0 for c in coeffs) else 0
    even = all(e[0] % 2 == 0 and e[1] % 2 == 0 and e[2] == 0 for e, _ in p.items())
    form = sign * p if sign else p
    semidef = bool(sign) and even
    pure_x = any(e[1] == 0 and e[0] > 0 for e, _ in p.items())
    pure_y = any(e[0] == 0 and e[1] > 0 for e, _ in p.items())
    return CertificateAnalysis(render(dens), sign, render(ScalarField.poly(form)),
                               semidef and pure_x and pure_y, semidef)


# -- scan -------------------------------------------------------------------

@dataclass
class ScanResult:
    lambdas: np.ndarray                 # (L,)
    radii: np.ndarray                   # (R,)
    angles: np.ndarray                  # (A,)
    miss_norm: np.ndarray               # (L, R, A)
    shots: list[ShootResult] = field(default_factory=list)
    nontrivial: list[dict] = field(default_factory=list)

    @property
    def min_miss(self) -> float:
        return float(np.min(self.miss_norm))

    @property
    def min_miss_per_lambda(self) -> np.ndarray:
        return self.miss_norm.reshape(len(self.lambdas), -1).min(axis=1)

    @property
    def all_trivial(self) -> bool:
        return all(s.trivial for s in self.shots)

    def rows(self):
        """(lambda, angle, radius, miss_norm) sorted by lambda, angle, radius."""
        for i, lam in enumerate(self.lambdas):
            for k, ang in enumerate(self.angles):
                for j, r in enumerate(self.radii):
                    yield float(lam), float(ang), float(r), float(self.miss_norm[i, j, k])


def nonbifurcation_scan(sys, q0, t_window, radius: float, grid_n: int, *, speed: float,
                        n_lambda: int = 17, n_seeds: int = 16, seed_radius: float | None = None,
                        weight: ScalarField | None = None, tol: float = DEFAULT_TOL,
                        shoot_tol: float = SHOOT_TOL) -> ScanResult:
    """Grid scan of the miss map plus multi-seed Newton near a conjugate parameter."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if grid_n < 16:
        raise ValueError("grid_n must be at least 16")
    lams = np.linspace(t_window[0], t_window[1], n_lambda)
    radii = radius * np.arange(1, grid_n + 1) / grid_n
    angles = 2 * np.pi * np.arange(grid_n) / grid_n
    R, A = np.meshgrid(radii, angles, indexing="ij")
    W = np.column_stack([(R * np.cos(A)).ravel(), (R * np.sin(A)).ravel()])
    # a shot that wanders far from the axis, or into a region of violent
    # forcing, is recorded as an infinite miss
    states = shoot_states(sys, q0, W, speed, lams, tol, escape=ESCAPE_FACTOR * radius,
                          cap=SCAN_ACCEL_CAP)
    miss = np.linalg.norm(states[:, :, :2], axis=-1).reshape(n_lambda, grid_n, grid_n)
    miss = np.where(np.isnan(miss), np.inf, miss)

    sr = 0.75 * radius if seed_radius is None else seed_radius
    seed_ang = 2 * np.pi * np.arange(n_seeds) / n_seeds
    seeds = sr * np.column_stack([np.cos(seed_ang), np.sin(seed_ang)])
    all_lams = np.repeat(lams, n_seeds)
    all_seeds = np.tile(seeds, (n_lambda, 1))
    shots = newton_shoot_many(sys, q0, all_lams, all_seeds, speed=speed, tol=shoot_tol, itol=tol)
    result = ScanResult(lams, radii, angles, miss, shots)

    for s in shots:
        if s.status != "no-convergence" and not s.trivial:
            rtol, atol = tolerances(tol)
            y0 = _initial_states(q0, s.w, speed)[0]
            sol = dopri5(state_rhs(sys), 0.0, y0, s.lam, rtol=rtol, atol=atol)
            curve = lambda t, d=sol.dense: d(t)[..., :3]
            result.nontrivial.append({
                "lambda": s.lam, "w": (float(s.w[0]), float(s.w[1])), "status": s.status,
                "certificate": {v: certificate_integral(v, curve, s.lam, weight).value
                                for v in CERTIFICATE_FORMS},
            })
    return result


# -- verdict ----------------------------------------------------------------

@dataclass
class Verdict:
    scenario: str
    sign_variant: str
    t_star: float                       # conjugate parameter in the shooting time
    classification: str                # bifurcating | certified-non-bifurcating | undecided
    reason: str
    branches: list[str] = field(default_factory=list)
    min_miss: float | None = None
    floor: float | None = None
    newton_runs: int = 0
    newton_trivial: int = 0
    certificate: CertificateAnalysis | None = None


def classify(scenario: str, sign_variant: str, t_star: float, branches: list[Branch],
             scan: ScanResult | None, analysis: CertificateAnalysis | None,
             floor: float) -> Verdict:
    good = [b.name for b in branches if branch_converges(b, t_star)]
    v = Verdict(scenario, sign_variant, t_star, "undecided", "", good, certificate=analysis, floor=floor)
    if scan is not None:
        v.min_miss = scan.min_miss
        v.newton_runs = len(scan.shots)
        v.newton_trivial = sum(s.trivial for s in scan.shots)
    if good:
        v.classification = "bifurcating"
        v.reason = f"branches {', '.join(good)} return to the axis at times converging to t*"
        if scan is not None and scan.nontrivial:
            v.reason += f"; Newton found {len(scan.nontrivial)} nontrivial zeros"
        return v
    if scan is None:
        v.reason = "no branch and no scan"
        return v
    scan_ok = scan.min_miss >= floor and scan.all_trivial
    if scan_ok and analysis is not None and analysis.certifies:
        v.classification = "certified-non-bifurcating"
        v.reason = ("scan floor held, every Newton run reached the trivial solution, and the "
                    "Wronskian density is a positive weight times a definite form")
    elif scan_ok:
        v.reason = "no branch found (numerical); no certificate"
    else:
        v.reason = "scan found near-zeros of the miss map but no converging branch"
    return v
