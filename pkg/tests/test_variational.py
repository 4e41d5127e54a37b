import math

import numpy as np
import pytest

import conjlab.variational as var
from conjlab.dynamics import integrate, mechanical_from_conformal
from conjlab.fields import ScalarField, X, Y
from conjlab.geometry import EUCLIDEAN, MechanicalSystem
from conjlab.variational import (GridTooCoarse, _scan, conjugate_points, detect_conjugates,
                                 jacobi_flow, variational_flow)

from systems import GM, MPP, MPP_CONF, NEW, NEW_CONF, ORIGIN, SQRT2, T_CONF

TWO_PI = (0.0, 2 * math.pi)
K = 1 / math.sqrt(math.pi)

# (system, v0, interval): axis base curves of every scenario, both pictures
BASES = {
    "mpp-perturbed": (MPP, (0, 0, 1), TWO_PI),
    "new-perturbed": (NEW, (0, 0, 1), TWO_PI),
    "mpp-conformal/mechanical": (mechanical_from_conformal(MPP_CONF, 0.0), (0, 0, SQRT2), TWO_PI),
    "new-conformal/mechanical": (mechanical_from_conformal(NEW_CONF, 0.0), (0, 0, SQRT2), TWO_PI),
    "mpp-conformal/geodesic": (MPP_CONF, (0, 0, SQRT2), TWO_PI),
    "new-conformal/geodesic": (NEW_CONF, (0, 0, K), TWO_PI),
    "new-perturbed/off-axis": (NEW, (0.15, -0.1, 1), TWO_PI),
}


def _diag_flow(fs):
    """Vectorised t -> diag(f0(t), f1(t), f2(t))."""
    def M(t):
        t = np.asarray(t, float)
        out = np.zeros(t.shape + (3, 3))
        for i, f in enumerate(fs):
            out[..., i, i] = f(t)
        return out
    return M


def test_flow_initial_conditions():
    flow = variational_flow(NEW, ORIGIN, (0.1, 0.2, 1), TWO_PI)
    assert np.array_equal(flow.M(0.0), np.zeros((3, 3)))
    assert np.array_equal(flow.Mdot(0.0), np.eye(3))
    assert flow.interval == TWO_PI


def test_flow_mpp_closed_form():
    flow = variational_flow(MPP, ORIGIN, (0, 0, 1), TWO_PI)
    ts = np.linspace(0, 2 * math.pi, 101)
    exact = np.zeros((101, 3, 3))
    exact[:, 0, 0] = exact[:, 1, 1] = np.sin(ts)
    exact[:, 2, 2] = ts
    assert np.max(np.abs(flow.M(ts) - exact)) <= 1e-9


def test_flow_free():
    free = MechanicalSystem(GM, ScalarField())
    flow = variational_flow(free, ORIGIN, (0.3, 0, 1), (0, 3))
    for t in (0.5, 1.7, 3.0):
        np.testing.assert_allclose(flow.M(t), t * np.eye(3), atol=1e-12)


@pytest.mark.parametrize("name", sorted(BASES))
def test_flow_matches_finite_difference(name):
    sys_, v0, interval = BASES[name]
    flow = variational_flow(sys_, ORIGIN, v0, interval)
    h = 1e-5
    ts = np.array([1.5, 0.4, 2.2, 3.9, 6.0])
    fd = np.empty((len(ts), 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        plus = integrate(sys_, ORIGIN, np.add(v0, e), interval).position(ts)
        minus = integrate(sys_, ORIGIN, np.subtract(v0, e), interval).position(ts)
        fd[:, :, j] = (plus - minus) / (2 * h)
    assert np.max(np.abs(flow.M(ts) - fd)) <= 1e-6


def test_conjugates_mpp():
    (cp,) = conjugate_points(MPP, ORIGIN, (0, 0, 1), TWO_PI)
    assert cp.t_star == pytest.approx(math.pi, abs=1e-8)
    assert cp.multiplicity == 2
    np.testing.assert_allclose(cp.position, (0, 0, math.pi), atol=1e-8)


def test_conjugates_mpp_conformal_reduced():
    sys_ = mechanical_from_conformal(MPP_CONF, 0.0)
    cps = conjugate_points(sys_, ORIGIN, (0, 0, SQRT2), (0, 4))
    assert len(cps) == 1
    assert cps[0].t_star == pytest.approx(T_CONF, abs=1e-8)
    assert cps[0].multiplicity == 2


def test_conjugates_new_conformal_geodesic():
    (cp,) = conjugate_points(NEW_CONF, ORIGIN, (0, 0, K), TWO_PI)
    assert cp.t_star == pytest.approx(math.pi**1.5, abs=1e-6)
    np.testing.assert_allclose(cp.position, (0, 0, math.pi), atol=1e-6)
    assert cp.multiplicity == 2


def test_jacobi_cross_check_new_conformal():
    flow = variational_flow(NEW_CONF, ORIGIN, (0, 0, K), TWO_PI)
    full = detect_conjugates(flow.M, flow.interval)
    mj = jacobi_flow(NEW_CONF, flow.base)
    alt = detect_conjugates(mj, flow.interval)
    assert [c.multiplicity for c in alt] == [c.multiplicity for c in full] == [2]
    assert abs(alt[0].t_star - full[0].t_star) <= 1e-8
    # the coefficient system is diag(1/pi, 1/pi, 0) with closed-form flow
    ts = np.linspace(0, 2 * math.pi, 41)
    s = math.sqrt(math.pi) * np.sin(ts / math.sqrt(math.pi))
    np.testing.assert_allclose(mj(ts)[:, 0, 0], s, atol=1e-9)
    np.testing.assert_allclose(mj(ts)[:, 2, 2], ts, atol=1e-9)


def test_cross_formulation_position():
    geo = conjugate_points(NEW_CONF, ORIGIN, (0, 0, K), TWO_PI)[0]
    mech = conjugate_points(mechanical_from_conformal(NEW_CONF, 0.0), ORIGIN, (0, 0, SQRT2),
                            (0, 4))[0]
    assert mech.t_star == pytest.approx(T_CONF, abs=1e-8)
    assert np.max(np.abs(np.subtract(geo.position, mech.position))) <= 1e-6


def test_no_false_positive_before_pi():
    assert conjugate_points(MPP, ORIGIN, (0, 0, 1), (0, math.pi - 0.1)) == []
    flow = variational_flow(MPP, ORIGIN, (0, 0, 1), (0, math.pi - 0.1))
    ts = np.linspace(1e-3, math.pi - 0.1, 500)
    assert np.all(np.linalg.det(flow.M(ts)) > 0)


def test_conjugates_sorted_and_interior():
    cps = conjugate_points(MPP, ORIGIN, (0, 0, 1), (0, 7.0))
    ts = [c.t_star for c in cps]
    assert ts == sorted(ts)
    assert ts == pytest.approx([math.pi, 2 * math.pi], abs=1e-8)
    assert all(0 < t < 7 for t in ts)


def test_simple_roots_by_sign_change():
    sys_ = MechanicalSystem(EUCLIDEAN, 0.5 * X**2 + 2 * Y**2)   # frequencies 1 and 2
    cps = conjugate_points(sys_, ORIGIN, (0, 0, 1), (0, 4))
    assert [c.multiplicity for c in cps] == [1, 2]
    assert [c.t_star for c in cps] == pytest.approx([math.pi / 2, math.pi], abs=1e-8)


def test_synthetic_even_and_odd_roots():
    M = _diag_flow([np.sin, lambda t: np.sin(2 * t), lambda t: t])
    cps = detect_conjugates(M, (0, 5.0))
    assert [(round(c.t_star, 9), c.multiplicity) for c in cps] == [
        (round(math.pi / 2, 9), 1), (round(math.pi, 9), 2), (round(1.5 * math.pi, 9), 1)]
    assert all(math.isnan(p) for p in cps[0].position)


def test_close_roots_resolved_by_refinement():
    gap = 0.003
    w = math.pi / (math.pi - gap)
    M = _diag_flow([np.sin, lambda t: np.sin(w * t), lambda t: t])
    with pytest.raises(GridTooCoarse):
        _scan(M, 0.0, 4.0, 2048)
    cps = detect_conjugates(M, (0.0, 4.0))
    assert [c.t_star for c in cps] == pytest.approx([math.pi - gap, math.pi], abs=1e-9)
    assert [c.multiplicity for c in cps] == [1, 1]


def test_grid_too_coarse_after_refinement(monkeypatch):
    grids = []

    def always_coarse(M, a, b, n):
        grids.append(n)
        raise GridTooCoarse("distinct zeros within one grid cell")

    monkeypatch.setattr(var, "_scan", always_coarse)
    with pytest.raises(GridTooCoarse, match="within one grid cell"):
        detect_conjugates(_diag_flow([np.sin, np.sin, np.sin]), (0.0, 4.0))
    assert grids == [2048, 8 * 2048]


def test_flow_tracks_new_coupling_off_axis():
    # off the axis the transverse block is not diagonal; sanity-check symmetry of the
    # Hessian term through the flow: M^T Mdot - Mdot^T M is conserved (= 0)
    flow = variational_flow(NEW, ORIGIN, (0.15, -0.1, 1), TWO_PI)
    for t in (1.0, 3.0, 6.0):
        m, md = flow.M(t), flow.Mdot(t)
        assert np.max(np.abs(m.T @ np.diag(GM.array) @ md - md.T @ np.diag(GM.array) @ m)) <= 1e-8
