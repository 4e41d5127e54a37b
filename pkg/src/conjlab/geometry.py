"""Flat diagonal metrics on R^3, potentials on them, and conformal rescalings.

Curvature is returned in the sign convention

    R(X, Y) Z = -D_X D_Y Z + D_Y D_X Z + D_[X,Y] Z,

under which the Jacobi equation reads ``xi'' + R(gamma', xi) gamma' + ... = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .fields import ScalarField, as_field, evaluate_stack

AXIS_TOL = 1e-12


class AxisConditionError(ValueError):
    """Christoffel symbols do not vanish along the base curve."""


@dataclass(frozen=True)
class Signature:
    eps: tuple[int, int, int]

    def __post_init__(self):
        eps = tuple(int(e) for e in self.eps)
        if len(eps) != 3 or any(e not in (-1, 1) for e in eps):
            raise ValueError(f"signature entries must be +1 or -1, got {self.eps!r}")
        object.__setattr__(self, "eps", eps)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.eps, dtype=float)

    def inner(self, u, v) -> np.ndarray:
        """Flat inner product of vectors with trailing axis 3."""
        return np.einsum("...i,i,...i->...", np.asarray(u, float), self.array, np.asarray(v, float))


EUCLIDEAN = Signature((1, 1, 1))


def metric_gradient(sig: Signature, f: ScalarField) -> tuple[ScalarField, ScalarField, ScalarField]:
    """Index-raised gradient: component i is ``eps_i * d f / d x_i``."""
    f = as_field(f)
    return tuple(e * f.partial(i) for i, e in enumerate(sig.eps))


def _eval_many(fields, q) -> np.ndarray:
    return evaluate_stack(fields, q)


def _eval_hessian(hess_fields, q) -> np.ndarray:
    flat = _eval_many([hess_fields[i][j] for i in range(3) for j in range(3)], q)
    return flat.reshape(flat.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class MechanicalSystem:
    """Flat metric plus time-independent potential: ``q'' = -grad_g V(q)``."""

    signature: Signature
    potential: ScalarField

    def __post_init__(self):
        object.__setattr__(self, "potential", as_field(self.potential))

    @cached_property
    def grad_fields(self):
        return self.potential.gradient()

    @cached_property
    def hess_fields(self):
        return self.potential.hessian()

    def acceleration(self, q, v) -> np.ndarray:
        return -self.signature.array * _eval_many(self.grad_fields, q)

    def acceleration_jacobian(self, q, v) -> tuple[np.ndarray, np.ndarray]:
        """(d acc/dq, d acc/dv) with shapes (..., 3, 3)."""
        h = _eval_hessian(self.hess_fields, q)
        aq = -self.signature.array[:, None] * h
        return aq, np.zeros_like(aq)

    def energy_density(self, q, v) -> np.ndarray:
        """Mechanical energy ``1/2 g(v, v) + V(q)``."""
        return 0.5 * self.signature.inner(v, v) + self.potential.at(q)


@dataclass(frozen=True)
class ConformalMetric:
    """``g = exp(2 rho) g_flat``; geodesics solve ``q'' + Gamma(q', q') = 0``."""

    signature: Signature
    rho: ScalarField

    @cached_property
    def grad_fields(self):
        return self.rho.gradient()

    @cached_property
    def hess_fields(self):
        return self.rho.hessian()

    def __post_init__(self):
        if not as_field(self.rho).is_polynomial():
            raise ValueError("conformal exponent rho must be a polynomial")
        object.__setattr__(self, "rho", as_field(self.rho))

    @cached_property
    def conformal_factor(self) -> ScalarField:
        return ScalarField.exp2(self.rho.as_poly())

    def inner(self, q, u, v) -> np.ndarray:
        return self.conformal_factor.at(q) * self.signature.inner(u, v)

    def acceleration(self, q, v) -> np.ndarray:
        v = np.asarray(v, float)
        eps = self.signature.array
        drho = _eval_many(self.grad_fields, q)
        rv = np.sum(drho * v, axis=-1)[..., None]
        vv = self.signature.inner(v, v)[..., None]
        return -2.0 * v * rv + eps * drho * vv

    def acceleration_jacobian(self, q, v) -> tuple[np.ndarray, np.ndarray]:
        v = np.asarray(v, float)
        eps = self.signature.array
        drho = _eval_many(self.grad_fields, q)
        h = _eval_hessian(self.hess_fields, q)
        vv = self.signature.inner(v, v)[..., None, None]
        hv = np.einsum("...jm,...j->...m", h, v)
        aq = -2.0 * v[..., :, None] * hv[..., None, :] + eps[:, None] * h * vv
        rv = np.sum(drho * v, axis=-1)[..., None, None]
        av = (
            -2.0 * rv * np.eye(3)
            - 2.0 * v[..., :, None] * drho[..., None, :]
            + 2.0 * (eps * drho)[..., :, None] * (eps * v)[..., None, :]
        )
        return aq, av


def christoffel(metric: ConformalMetric, q) -> np.ndarray:
    """Gamma[..., i, j, k] = d_i^j rho_k + d_i^k rho_j - eps_j d_jk eps_i rho_i."""
    eps = metric.signature.array
    d = _eval_many(metric.grad_fields, q)
    eye = np.eye(3)
    g = (
        eye[:, :, None] * d[..., None, None, :]
        + eye[:, None, :] * d[..., None, :, None]
        - (eps * d)[..., :, None, None] * (eps[:, None] * eye)[None, :, :]
    )
    return g


def christoffel_derivative(metric: ConformalMetric, q) -> np.ndarray:
    """dGamma[..., m, i, j, k] = d Gamma^i_jk / d x_m, exact."""
    eps = metric.signature.array
    h = _eval_hessian(metric.hess_fields, q)
    eye = np.eye(3)
    # h[..., a, m] = d_a d_m rho
    t1 = np.einsum("ij,...km->...mijk", eye, h)
    t2 = np.einsum("ik,...jm->...mijk", eye, h)
    t3 = np.einsum("i,...im,jk->...mijk", eps, h, eps[:, None] * eye)
    return t1 + t2 - t3


def riemann(metric: ConformalMetric, q) -> np.ndarray:
    """Components R[..., i, j, k, l] with R(d_k, d_l) d_j = R^i_jkl d_i (module convention)."""
    g = christoffel(metric, q)
    dg = christoffel_derivative(metric, q)
    # common convention first: d_k G^i_lj - d_l G^i_kj + G^i_km G^m_lj - G^i_lm G^m_kj
    std = (
        np.einsum("...kilj->...ijkl", dg)
        - np.einsum("...likj->...ijkl", dg)
        + np.einsum("...ikm,...mlj->...ijkl", g, g)
        - np.einsum("...ilm,...mkj->...ijkl", g, g)
    )
    return -std


def curvature(metric: ConformalMetric, q, X, Y, Z) -> np.ndarray:
    """R(X, Y) Z at q."""
    r = riemann(metric, q)
    return np.einsum("...ijkl,...j,...k,...l->...i", r, np.asarray(Z, float),
                     np.asarray(X, float), np.asarray(Y, float))


def jacobi_coefficients(system, base, t: float) -> np.ndarray:
    """Matrix A(t) of the Jacobi system ``xi'' + A(t) xi = 0`` along ``base``.

    ``base`` is anything with ``state(t) -> (q, v)``.  For a conformal metric the
    covariant derivative along the curve must reduce to d/dt, i.e. the
    Christoffel symbols must vanish there.
    """
    q, v = base.state(t)
    q, v = np.asarray(q, float), np.asarray(v, float)
    if isinstance(system, MechanicalSystem):
        h = _eval_hessian(system.hess_fields, q)
        return system.signature.array[:, None] * h
    if isinstance(system, ConformalMetric):
        gam = christoffel(system, q)
        if np.max(np.abs(gam)) > AXIS_TOL:
            raise AxisConditionError(
                f"axis condition violated at t={t}: max |Gamma| = {np.max(np.abs(gam)):.3e}"
            )
        r = riemann(system, q)
        # (A xi)^i = R^i_jkl v^j v^k xi^l
        return np.einsum("ijkl,j,k->il", r, v, v)
    raise TypeError(f"unsupported system type {type(system).__name__}")
