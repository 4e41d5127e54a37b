import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conjlab.dynamics import (EnergyMismatch, energy, integrate, integrate_geodesic,
                              integrate_pgeodesic, mechanical_energy, mechanical_from_conformal,
                              ode_residual, residual_pgeodesic, state_rhs, tolerances,
                              verify_correspondence)
from conjlab.fields import ScalarField, X, exp2
from conjlab.geometry import ConformalMetric, EUCLIDEAN, MechanicalSystem
from conjlab.integrate import StepSizeUnderflow, dopri5, rk4

from systems import GM, MPP, MPP_CONF, NEW, NEW_CONF, ORIGIN, RHO_NEW, RHO_OLD, SQRT2, T_CONF

TWO_PI = (0.0, 2 * math.pi)
TS = np.linspace(0, 2 * math.pi, 401)


# -- explicit families ------------------------------------------------------

@pytest.mark.parametrize("alpha", [0.1, 0.7, 1.3])
def test_u_alpha_residual(alpha):
    q = np.column_stack([alpha * np.sin(TS), 0 * TS, TS])
    qdd = np.column_stack([-alpha * np.sin(TS), 0 * TS, 0 * TS])
    assert residual_pgeodesic(MPP, q, qdd) <= 1e-12


@pytest.mark.parametrize("alpha", [0.1, 0.7, 1.3])
def test_v_alpha_residual(alpha):
    q = np.column_stack([0 * TS, alpha * np.sin(TS), TS])
    qdd = np.column_stack([0 * TS, -alpha * np.sin(TS), 0 * TS])
    assert residual_pgeodesic(MPP, q, qdd) <= 1e-12


def test_residual_detects_non_solution():
    q = np.column_stack([0.5 * np.sin(TS), 0.5 * np.sin(TS), TS])
    qdd = np.column_stack([-0.5 * np.sin(TS), -0.5 * np.sin(TS), 0 * TS])
    assert residual_pgeodesic(MPP, q, qdd) > 1e-3


def test_residual_straight_line_free():
    free = MechanicalSystem(GM, ScalarField())
    q = np.column_stack([TS, 2 * TS, -TS])
    assert residual_pgeodesic(free, q, np.zeros_like(q)) == 0.0


def test_integrated_u_alpha():
    tr = integrate_pgeodesic(MPP, ORIGIN, (0.3, 0, 1), TWO_PI)
    exact = np.column_stack([0.3 * np.sin(tr.t), 0 * tr.t, tr.t])
    assert np.max(np.abs(tr.q - exact)) <= 1e-9
    mids = 0.5 * (tr.t[1:] + tr.t[:-1])
    dense = tr.position(mids)
    assert np.max(np.abs(dense[:, 0] - 0.3 * np.sin(mids))) <= 1e-9


def test_axis_solution():
    tr = integrate_pgeodesic(NEW, ORIGIN, (0, 0, 1), TWO_PI)
    assert tr.t[0] == 0.0 and tr.t[-1] == 2 * math.pi
    assert np.all(np.diff(tr.t) > 0)
    assert np.all(tr.q[:, :2] == 0)
    assert np.max(np.abs(tr.q[:, 2] - tr.t)) <= 1e-12


def test_against_scipy_dop853():
    tr = integrate_pgeodesic(NEW, ORIGIN, (0.2, 0.1, 1), TWO_PI)
    ref = solve_ivp(lambda t, y: state_rhs(NEW)(t, y), TWO_PI, [0, 0, 0, 0.2, 0.1, 1],
                    method="DOP853", rtol=1e-13, atol=1e-14, dense_output=True)
    np.testing.assert_allclose(tr.dense(TS), ref.sol(TS).T, atol=1e-9)


def test_type_checks():
    with pytest.raises(TypeError):
        integrate_pgeodesic(NEW_CONF, ORIGIN, (0, 0, 1), TWO_PI)
    with pytest.raises(TypeError):
        integrate_geodesic(NEW, ORIGIN, (0, 0, 1), TWO_PI)
    with pytest.raises(ValueError):
        integrate_pgeodesic(NEW, ORIGIN, (0, 0, 1), TWO_PI, tol=0.0)


def test_blow_up_reports_failing_time():
    sys_ = MechanicalSystem(EUCLIDEAN, -X**4)     # x'' = 4 x^3, finite-time blow-up
    with pytest.raises(StepSizeUnderflow) as exc:
        integrate_pgeodesic(sys_, (1, 0, 0), (1, 0, 0), (0, 5))
    assert 0 < exc.value.t < 5
    assert f"t={exc.value.t!r}" in str(exc.value)


@pytest.mark.parametrize("tol", [1e-12, 1e-10, 1e-8])
@pytest.mark.parametrize("sys_", [MPP, NEW], ids=["mpp", "new"])
def test_ode_residual_of_dense_output(sys_, tol):
    tr = integrate_pgeodesic(sys_, ORIGIN, (0.3, 0.1, 1), TWO_PI, tol)
    rtol, _ = tolerances(tol)
    assert ode_residual(sys_, tr) <= 10 * rtol


def test_tolerance_mapping():
    assert tolerances(1e-12) == (1e-10, 1e-12)
    assert tolerances(1e-2) == (1e-3, 1e-2)


# -- conservation -----------------------------------------------------------

def test_axis_energy_drift_new():
    tr = integrate_pgeodesic(NEW, ORIGIN, (0, 0, 1), TWO_PI)
    e = mechanical_energy(NEW, tr, TS)
    assert np.max(np.abs(e - e[0])) <= 1e-10


@pytest.mark.parametrize("sys_, v0", [(MPP, (0.3, 0.2, 1)), (NEW, (0.2, 0.1, 1)),
                                      (NEW, (-0.1, 0.25, 1))], ids=["mpp", "new-a", "new-b"])
def test_mechanical_energy_conserved(sys_, v0):
    tr = integrate_pgeodesic(sys_, ORIGIN, v0, TWO_PI)
    e = mechanical_energy(sys_, tr, TS)
    assert np.max(np.abs(e - e[0])) <= 1e-9


@pytest.mark.parametrize("metric, v0", [(NEW_CONF, (0.1, 0.05, 1 / math.sqrt(math.pi))),
                                        (MPP_CONF, (0.05, -0.1, 1.0))], ids=["new", "mpp"])
def test_geodesic_speed_conserved(metric, v0):
    tr = integrate_geodesic(metric, ORIGIN, v0, TWO_PI)
    q, v = tr.state(TS)
    s = metric.inner(q, v, v)
    assert np.max(np.abs(s - s[0])) <= 1e-9


# -- conformal geodesics ----------------------------------------------------

def test_new_conformal_axis_geodesic():
    k = 1 / math.sqrt(math.pi)
    tr = integrate_geodesic(NEW_CONF, ORIGIN, (0, 0, k), TWO_PI)
    q, v = tr.state(TS)
    assert np.max(np.abs(q - np.column_stack([0 * TS, 0 * TS, k * TS]))) <= 1e-10
    s = NEW_CONF.inner(q, v, v)
    assert np.max(np.abs(s - 1 / math.pi)) <= 1e-10
    assert tr.position(2 * math.pi)[2] == pytest.approx(2 * math.sqrt(math.pi), abs=1e-10)


def test_new_conformal_energy_is_one():
    tr = integrate_geodesic(NEW_CONF, ORIGIN, (0, 0, 1 / math.sqrt(math.pi)), TWO_PI)
    assert abs(energy(NEW_CONF, tr) - 1.0) <= 1e-10


def test_flat_metric_geodesic_is_line():
    flat = ConformalMetric(GM, ScalarField())
    tr = integrate_geodesic(flat, (1, 2, 3), (0.5, -1, 2), (0, 3))
    exact = np.array([1, 2, 3]) + tr.t[:, None] * np.array([0.5, -1, 2])
    assert np.max(np.abs(tr.q - exact)) <= 1e-12


def test_free_energy_functional():
    free = MechanicalSystem(GM, ScalarField())
    v = np.array([1.0, 2.0, 3.0])
    tr = integrate_pgeodesic(free, ORIGIN, v, (0, 2.5))
    assert energy(free, tr) == pytest.approx(0.5 * GM.inner(v, v) * 2.5, rel=1e-12)


def test_energy_rejects_unknown_system():
    tr = integrate_pgeodesic(NEW, ORIGIN, (0, 0, 1), (0, 1))
    with pytest.raises(TypeError):
        energy(object(), tr)


# -- conformal to mechanical ------------------------------------------------

def test_mechanical_from_conformal_potential():
    sys_ = mechanical_from_conformal(NEW_CONF, 0.0)
    assert sys_.potential == -exp2(RHO_NEW)
    assert sys_.signature == GM
    assert 0.0 - sys_.potential == NEW_CONF.conformal_factor
    sys_c = mechanical_from_conformal(MPP_CONF, 1.5)
    assert 1.5 - sys_c.potential == exp2(RHO_OLD)


def test_mechanical_from_flat_conformal():
    sys_ = mechanical_from_conformal(ConformalMetric(GM, ScalarField()), 0.0)
    assert sys_.potential == ScalarField.const(-1.0)
    tr = integrate_pgeodesic(sys_, ORIGIN, (0.2, 0.3, 1), (0, 4))
    assert np.max(np.abs(tr.q - tr.t[:, None] * np.array([0.2, 0.3, 1]))) <= 1e-12


def test_mechanical_potential_below_energy():
    g = np.linspace(-1, 1, 9)
    pts = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
    for metric in (NEW_CONF, MPP_CONF):
        assert np.max(mechanical_from_conformal(metric, 0.0).potential.at(pts)) < 0.0


@pytest.mark.parametrize("metric", [NEW_CONF, MPP_CONF], ids=["new", "mpp"])
def test_mechanical_energy_zero_on_axis(metric):
    sys_ = mechanical_from_conformal(metric, 0.0)
    tr = integrate_pgeodesic(sys_, ORIGIN, (0, 0, SQRT2), TWO_PI)
    assert np.max(np.abs(mechanical_energy(sys_, tr, TS))) <= 1e-12


def test_correspondence_flat():
    metric = ConformalMetric(GM, ScalarField())
    sys_ = mechanical_from_conformal(metric, 0.0)
    tr = integrate_pgeodesic(sys_, ORIGIN, (0, 0, SQRT2), (0, 3))
    rep = verify_correspondence(metric, 0.0, tr)
    assert rep.max_residual == 0.0
    np.testing.assert_allclose(rep.positions[:, 2], rep.s, atol=1e-12)
    np.testing.assert_allclose(rep.velocities, np.tile([0, 0, 1.0], (len(rep.s), 1)), atol=1e-12)


@pytest.mark.parametrize("metric", [NEW_CONF, MPP_CONF], ids=["new", "mpp"])
def test_correspondence_on_axis(metric):
    sys_ = mechanical_from_conformal(metric, 0.0)
    tr = integrate_pgeodesic(sys_, ORIGIN, (0, 0, SQRT2), TWO_PI)
    rep = verify_correspondence(metric, 0.0, tr)
    assert rep.max_residual <= 1e-8
    assert np.all(np.diff(rep.time_map[:, 1]) > 0)
    s_star = np.interp(T_CONF, rep.time_map[:, 0], rep.time_map[:, 1])
    assert s_star == pytest.approx(math.pi, abs=1e-9)
    np.testing.assert_allclose(rep.position_at_time(T_CONF), [0, 0, math.pi], atol=1e-9)


def test_correspondence_off_axis():
    # a generic energy-zero p-geodesic maps to a geodesic as well
    sys_ = mechanical_from_conformal(NEW_CONF, 0.0)
    q0 = np.array([0.05, -0.03, 0.0])
    vt = np.array([0.02, 0.01])
    vz = math.sqrt(2 * (-sys_.potential.at(q0)) - GM.inner([*vt, 0], [*vt, 0]))
    tr = integrate_pgeodesic(sys_, q0, (*vt, vz), (0, 1.0))
    rep = verify_correspondence(NEW_CONF, 0.0, tr)
    assert rep.max_residual <= 1e-8


def test_correspondence_energy_mismatch():
    sys_ = mechanical_from_conformal(NEW_CONF, 0.0)
    tr = integrate_pgeodesic(sys_, ORIGIN, (0, 0, 1), (0, 1))
    with pytest.raises(EnergyMismatch, match="differs"):
        verify_correspondence(NEW_CONF, 0.0, tr)


# -- integrator -------------------------------------------------------------

def test_rk4_order():
    fun = lambda t, y: np.array([y[1], -y[0]])
    errs = []
    for n in (64, 128):
        ts, ys = rk4(fun, 0.0, [0.0, 1.0], 2 * math.pi, n)
        errs.append(np.max(np.abs(ys[:, 0] - np.sin(ts))))
    assert 12 <= errs[0] / errs[1] <= 20


def test_dopri5_batch_matches_single_rows():
    fun = state_rhs(NEW)
    y0 = np.array([[0, 0, 0, 0.1, 0.2, 1], [0, 0, 0, -0.2, 0.05, 1]], float)
    batch = dopri5(fun, 0, y0, 3.0, rtol=1e-11, atol=1e-13, t_eval=[1.0, 3.0], dense=False)
    for i in range(2):
        one = dopri5(fun, 0, y0[i], 3.0, rtol=1e-11, atol=1e-13, t_eval=[1.0, 3.0], dense=False)
        np.testing.assert_allclose(batch.y_eval[:, i], one.y_eval, atol=1e-10)


def test_dopri5_retire_isolates_blow_up():
    fun = lambda t, y: y**2
    y0 = np.array([[0.1], [1.0]])            # second row blows up at t = 1
    sol = dopri5(fun, 0, y0, 2.0, t_eval=[2.0], dense=False,
                 retire=lambda y, f: np.abs(y[..., 0]) > 1e3)
    assert sol.y_eval[0, 0, 0] == pytest.approx(0.1 / (1 - 0.2), rel=1e-9)
    assert np.isnan(sol.y_eval[0, 1, 0])


def test_dopri5_argument_checks():
    f = lambda t, y: y
    with pytest.raises(ValueError):
        dopri5(f, 1.0, [1.0], 0.0)
    with pytest.raises(ValueError):
        dopri5(f, 0.0, [1.0], 1.0, rtol=0)
    with pytest.raises(ValueError):
        dopri5(f, 0.0, [1.0], 1.0, t_eval=[0.5, 0.2])


def test_dense_output_bounds():
    tr = integrate(NEW, ORIGIN, (0, 0, 1), (0, 1))
    with pytest.raises(ValueError):
        tr.position(1.5)
