"""Catalog of exact Euler / Navier-Stokes velocity fields and PDE residuals.

All catalog fields carry closed-form Jacobians; second derivatives are
closed-form where cheap and otherwise obtained by differencing the analytic
Jacobian.  Entries are addressable by string id through :data:`CATALOG`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .geometry import (Array, FieldFn, VectorField, fd_derivative,
                       standard_symplectic_matrix)
from .flow import DiffusionSpec


@dataclass(frozen=True)
class VelocityField(VectorField):
    """Velocity ``u(x, t)`` with the extra data needed by PDE residuals.

    ``pressure_gradient`` is the ``grad P`` for which ``u`` solves the
    momentum equation; ``pressure`` is optional.
    """

    time_derivative: Optional[FieldFn] = None
    laplacian: Optional[FieldFn] = None
    pressure: Optional[Callable[[Array, float], Array]] = None
    pressure_gradient: Optional[FieldFn] = None
    nu: float = 0.0
    divergence_free: bool = True
    steady: bool = False

    def u_t(self, x, t=0.0):
        if self.steady:
            return np.zeros_like(np.asarray(x, dtype=float))
        if self.time_derivative is not None:
            return self.time_derivative(x, t)
        dt = 1e-6 * max(1.0, abs(t))
        return (self.value(x, t + dt) - self.value(x, t - dt)) / (2 * dt)

    def lap(self, x, t=0.0):
        if self.laplacian is not None:
            return self.laplacian(x, t)
        return np.trace(self.hess(x, t), axis1=-2, axis2=-1)

    def divergence(self, x, t=0.0):
        return np.trace(self.jac(x, t), axis1=-2, axis2=-1)

    def vorticity(self, x, t=0.0):
        """Curl ``xi = nabla x u``; 3-d fields only."""
        if self.dim != 3:
            raise ValueError("vorticity vector is defined for d=3 only")
        return curl_from_jacobian(self.jac(x, t))

    def with_viscosity(self, nu: float) -> "VelocityField":
        return replace(self, nu=float(nu))


def curl_from_jacobian(du: Array) -> Array:
    return np.stack([du[..., 2, 1] - du[..., 1, 2],
                     du[..., 0, 2] - du[..., 2, 0],
                     du[..., 1, 0] - du[..., 0, 1]], axis=-1)


@dataclass(frozen=True)
class ScalarField:
    """Scalar function with gradient and optional Hessian."""

    dim: int
    value: Callable[[Array, float], Array]
    gradient: Callable[[Array, float], Array]
    hessian: Optional[Callable[[Array, float], Array]] = None
    name: str = ""

    def __call__(self, x, t=0.0):
        return self.value(x, t)

    def grad(self, x, t=0.0):
        return self.gradient(x, t)

    def hess(self, x, t=0.0):
        if self.hessian is not None:
            return self.hessian(x, t)
        return fd_derivative(self.gradient, x, t)


# -- Taylor-Green ---------------------------------------------------------------

def taylor_green_2d(nu: float = 0.0, amplitude: float = 1.0,
                    pressure_scale: Optional[float] = None,
                    decay: Optional[float] = None, name: str = "taylor-green-2d") -> VelocityField:
    """``u = A e^{-2 nu t} (-cos x sin y, sin x cos y)``.

    With ``amplitude=1`` this solves Navier-Stokes with
    ``P = -1/4 e^{-4 nu t} (cos 2x + cos 2y)``.  ``pressure_scale`` and
    ``decay`` exist to build deliberately wrong variants.
    """
    if nu < 0:
        raise ValueError("viscosity must be non-negative")
    a = float(amplitude)
    ps = a * a if pressure_scale is None else float(pressure_scale)
    lam = 2.0 * nu if decay is None else float(decay)

    def amp(t):
        return a * np.exp(-lam * t)

    def trig(x):
        x = np.asarray(x, dtype=float)
        return np.cos(x[..., 0]), np.sin(x[..., 0]), np.cos(x[..., 1]), np.sin(x[..., 1])

    def value(x, t):
        cx, sx, cy, sy = trig(x)
        return amp(t) * np.stack([-cx * sy, sx * cy], axis=-1)

    def _jac(cx, sx, cy, sy, e):
        out = np.empty(cx.shape + (2, 2))
        out[..., 0, 0] = e * sx * sy
        out[..., 0, 1] = -e * cx * cy
        out[..., 1, 0] = e * cx * cy
        out[..., 1, 1] = -e * sx * sy
        return out

    def jacobian(x, t):
        return _jac(*trig(x), amp(t))

    def both(x, t):
        cx, sx, cy, sy = trig(x)
        e = amp(t)
        return e * np.stack([-cx * sy, sx * cy], axis=-1), _jac(cx, sx, cy, sy, e)

    def hessian(x, t):
        cx, sx, cy, sy = trig(x)
        e = amp(t)
        h = np.empty(cx.shape + (2, 2, 2))
        h[..., 0, 0, 0] = e * cx * sy
        h[..., 0, 0, 1] = h[..., 0, 1, 0] = e * sx * cy
        h[..., 0, 1, 1] = e * cx * sy
        h[..., 1, 0, 0] = -e * sx * cy
        h[..., 1, 0, 1] = h[..., 1, 1, 0] = -e * cx * sy
        h[..., 1, 1, 1] = -e * sx * cy
        return h

    def u_t(x, t):
        return -lam * value(x, t)

    def lap(x, t):
        return -2.0 * value(x, t)

    def pressure(x, t):
        x = np.asarray(x, dtype=float)
        return -0.25 * ps * np.exp(-2 * lam * t) * (np.cos(2 * x[..., 0]) + np.cos(2 * x[..., 1]))

    def grad_p(x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * ps * np.exp(-2 * lam * t) * np.stack(
            [np.sin(2 * x[..., 0]), np.sin(2 * x[..., 1])], axis=-1)

    return VelocityField(2, value, jacobian, hessian, both, name=name,
                         time_derivative=u_t, laplacian=lap, pressure=pressure,
                         pressure_gradient=grad_p, nu=float(nu),
                         steady=(lam == 0.0))


def embed_2d_in_3d(f: VelocityField) -> VelocityField:
    """Extend a planar field to R^3 with ``u_3 = 0`` and no z-dependence."""
    if f.dim != 2:
        raise ValueError("embed_2d_in_3d needs a 2-d field")

    def lift(v):
        return np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)

    def value(x, t):
        return lift(f.value(np.asarray(x)[..., :2], t))

    def jacobian(x, t):
        j2 = f.jac(np.asarray(x)[..., :2], t)
        out = np.zeros(j2.shape[:-2] + (3, 3))
        out[..., :2, :2] = j2
        return out

    def both(x, t):
        v, j2 = f.value_and_jac(np.asarray(x)[..., :2], t)
        out = np.zeros(j2.shape[:-2] + (3, 3))
        out[..., :2, :2] = j2
        return lift(v), out

    def hessian(x, t):
        h2 = f.hess(np.asarray(x)[..., :2], t)
        out = np.zeros(h2.shape[:-3] + (3, 3, 3))
        out[..., :2, :2, :2] = h2
        return out

    def wrap(g):
        if g is None:
            return None
        return lambda x, t: lift(g(np.asarray(x)[..., :2], t))

    pressure = None
    if f.pressure is not None:
        pressure = lambda x, t: f.pressure(np.asarray(x)[..., :2], t)  # noqa: E731

    return VelocityField(3, value, jacobian, hessian, both,
                         name=f.name.replace("2d", "3d") if "2d" in f.name else f.name + "-3d",
                         time_derivative=wrap(f.time_derivative), laplacian=wrap(f.laplacian),
                         pressure=pressure, pressure_gradient=wrap(f.pressure_gradient),
                         nu=f.nu, divergence_free=f.divergence_free, steady=f.steady)


# -- axisymmetric swirl fields --------------------------------------------------

@dataclass(frozen=True)
class SwirlProfile:
    """Radial data of ``u = f(r) (-y, x, 0) + c(r) e_3``.

    ``g = f'(r)/r`` and ``k = c'(r)/r`` must stay finite on the axis.
    """

    f: Callable[[Array], Array]
    g: Callable[[Array], Array]
    c: Callable[[Array], Array]
    k: Callable[[Array], Array]
    name: str = ""


def _sinc(r):
    return np.sinc(r / np.pi)


def _small_r(r, exact, series, cut=1e-3):
    r = np.asarray(r, dtype=float)
    rs = np.where(r < cut, cut, r)
    return np.where(r < cut, series(r), exact(rs))


def profile_from_bc(b: Callable, c: Callable, db: Optional[Callable] = None,
                    dc: Optional[Callable] = None, name: str = "") -> SwirlProfile:
    """Build a profile from azimuthal speed ``b(r)`` and axial speed ``c(r)``.

    Missing radial derivatives are differenced.  Profiles need ``b(r) = O(r)``
    near the axis; values at ``r < 1e-12`` use the limit.
    """
    h = 1e-6
    if db is None:
        db = lambda r: (b(r + h) - b(np.maximum(r - h, 0.0))) / (r + h - np.maximum(r - h, 0.0))  # noqa: E731
    if dc is None:
        dc = lambda r: (c(r + h) - c(np.maximum(r - h, 0.0))) / (r + h - np.maximum(r - h, 0.0))  # noqa: E731
    cut = 1e-4

    def f(r):
        r = np.asarray(r, dtype=float)
        rs = np.where(r < 1e-12, 1.0, r)
        return np.where(r < 1e-12, db(np.zeros_like(r)), b(rs) / rs)

    def g(r):
        r = np.asarray(r, dtype=float)
        rs = np.maximum(r, cut)
        return (db(rs) - f(rs)) / rs**2

    def k(r):
        r = np.asarray(r, dtype=float)
        rs = np.maximum(r, cut)
        return dc(rs) / rs

    if not np.isfinite(f(np.array(0.0))):
        raise ValueError("swirl profile singular on the axis")
    def cc(r):
        r = np.asarray(r, dtype=float)
        return c(r) * np.ones_like(r)

    return SwirlProfile(f, g, cc, k, name)


RIGID = SwirlProfile(lambda r: np.ones_like(np.asarray(r, dtype=float)),
                     lambda r: np.zeros_like(np.asarray(r, dtype=float)),
                     lambda r: np.ones_like(np.asarray(r, dtype=float)),
                     lambda r: np.zeros_like(np.asarray(r, dtype=float)), "rigid")

# b(r) = r sin r, c(r) = cos r
TWISTED = SwirlProfile(
    lambda r: np.sin(r),
    lambda r: np.where(np.asarray(r) < 1e-12, 0.0, np.cos(r) / np.maximum(r, 1e-12)),
    lambda r: np.cos(r),
    lambda r: -_sinc(r),
    "twisted")

# b(r) = sin(r)/2, c(r) = cos r: the coefficient field of the overtwisted form
OVERTWISTED = SwirlProfile(
    lambda r: 0.5 * _sinc(r),
    lambda r: _small_r(r, lambda s: 0.5 * (s * np.cos(s) - np.sin(s)) / s**3,
                       lambda s: -1.0 / 6.0 + s**2 / 60.0),
    lambda r: np.cos(r),
    lambda r: -_sinc(r),
    "overtwisted")


def axisymmetric_steady(profile: SwirlProfile, r_max: float = 50.0, n_nodes: int = 10_000,
                        name: str = "") -> VelocityField:
    """Steady Euler swirl field ``u = f(r)(-y, x, 0) + c(r) e_3``.

    The pressure gradient ``f^2 (x, y, 0)`` balances the centripetal term; the
    pressure itself is tabulated by trapezoid quadrature of ``f(s)^2 s``.
    """
    grid = np.linspace(0.0, r_max, n_nodes)
    dens = profile.f(grid) ** 2 * grid
    table = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    table.setflags(write=False)

    def parts(x):
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        return x[..., 0], x[..., 1], r

    def value(x, t):
        X, Y, r = parts(x)
        f = profile.f(r)
        return np.stack([-f * Y, f * X, profile.c(r)], axis=-1)

    def _jac(X, Y, r):
        f, g, k = profile.f(r), profile.g(r), profile.k(r)
        out = np.zeros(X.shape + (3, 3))
        out[..., 0, 0] = -g * X * Y
        out[..., 0, 1] = -f - g * Y * Y
        out[..., 1, 0] = f + g * X * X
        out[..., 1, 1] = g * X * Y
        out[..., 2, 0] = k * X
        out[..., 2, 1] = k * Y
        return out

    def jacobian(x, t):
        return _jac(*parts(x))

    def pressure(x, t):
        _, _, r = parts(x)
        return np.interp(r, grid, table)

    def grad_p(x, t):
        X, Y, r = parts(x)
        f2 = profile.f(r) ** 2
        return np.stack([f2 * X, f2 * Y, np.zeros_like(X)], axis=-1)

    def zero(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    return VelocityField(3, value, jacobian, name=name or f"axisymmetric-{profile.name}",
                         time_derivative=zero, pressure=pressure, pressure_gradient=grad_p,
                         nu=0.0, steady=True)


def rigid_rotation_3d() -> VelocityField:
    """``u = (-y, x, 1)``; pressure ``r^2 / 2``."""
    def value(x, t):
        x = np.asarray(x, dtype=float)
        return np.stack([-x[..., 1], x[..., 0], np.ones_like(x[..., 0])], axis=-1)

    du = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

    def jacobian(x, t):
        return np.broadcast_to(du, np.shape(x)[:-1] + (3, 3)).copy()

    def hessian(x, t):
        return np.zeros(np.shape(x)[:-1] + (3, 3, 3))

    def zero(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def pressure(x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * (x[..., 0] ** 2 + x[..., 1] ** 2)

    def grad_p(x, t):
        x = np.asarray(x, dtype=float)
        return np.stack([x[..., 0], x[..., 1], np.zeros_like(x[..., 0])], axis=-1)

    return VelocityField(3, value, jacobian, hessian, name="rigid-rotation-3d",
                         time_derivative=zero, laplacian=zero, pressure=pressure,
                         pressure_gradient=grad_p, steady=True)


def double_rotation_4d() -> VelocityField:
    """``u = (-y1, x1, -y2, x2)`` in coordinates ``(x1, y1, x2, y2)``; ``P = |x|^2/2``."""
    du = np.zeros((4, 4))
    du[0, 1] = du[2, 3] = -1.0
    du[1, 0] = du[3, 2] = 1.0

    def value(x, t):
        return np.einsum("ij,...j->...i", du, np.asarray(x, dtype=float))

    def jacobian(x, t):
        return np.broadcast_to(du, np.shape(x)[:-1] + (4, 4)).copy()

    def hessian(x, t):
        return np.zeros(np.shape(x)[:-1] + (4, 4, 4))

    def zero(x, t):
        return np.zeros_like(np.asarray(x, dtype=float))

    def pressure(x, t):
        return 0.5 * np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)

    return VelocityField(4, value, jacobian, hessian, name="double-rotation-4d",
                         time_derivative=zero, laplacian=zero, pressure=pressure,
                         pressure_gradient=lambda x, t: np.asarray(x, dtype=float),
                         steady=True)


def bernoulli(u: VelocityField) -> ScalarField:
    """``H = P + |u|^2 / 2`` with gradient ``grad P + Du^T u``."""
    if u.pressure is None or u.pressure_gradient is None:
        raise ValueError(f"{u.name} has no pressure")

    def value(x, t):
        v = u.value(x, t)
        return u.pressure(x, t) + 0.5 * np.sum(v * v, axis=-1)

    def gradient(x, t):
        v, du = u.value_and_jac(x, t)
        return u.pressure_gradient(x, t) + np.einsum("...ji,...j->...i", du, v)

    return ScalarField(u.dim, value, gradient, name=f"H[{u.name}]")


def reversed_field(u: VelocityField, horizon: float) -> VelocityField:
    """``w(q, t) = -u(q, T - t)``; solves the backward equation when ``u`` solves the forward one."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    T = float(horizon)

    def neg(fn):
        return lambda x, t: -fn(x, T - t)

    both = None
    if u.both is not None:
        def both(x, t):
            v, j = u.both(x, T - t)
            return -v, -j

    time_derivative = None
    if u.time_derivative is not None:
        time_derivative = lambda x, t: u.time_derivative(x, T - t)  # noqa: E731

    shift = (lambda fn: None if fn is None else (lambda x, t: fn(x, T - t)))
    return VelocityField(u.dim, neg(u.value), None if u.jacobian is None else neg(u.jacobian),
                         None if u.hessian is None else neg(u.hessian), both,
                         name=f"reversed({u.name})",
                         time_derivative=time_derivative if not u.steady else None,
                         laplacian=None if u.laplacian is None else neg(u.laplacian),
                         pressure=shift(u.pressure), pressure_gradient=shift(u.pressure_gradient),
                         nu=u.nu, divergence_free=u.divergence_free, steady=u.steady)


def scaled(u: VelocityField, factor: float, name: Optional[str] = None) -> VelocityField:
    """Multiply the velocity by ``factor`` but keep the original pressure (a non-solution)."""
    s = float(factor)

    def mul(fn):
        return None if fn is None else (lambda x, t: s * fn(x, t))

    both = None
    if u.both is not None:
        def both(x, t):
            v, j = u.both(x, t)
            return s * v, s * j

    return replace(u, value=mul(u.value), jacobian=mul(u.jacobian), hessian=mul(u.hessian),
                   both=both, time_derivative=mul(u.time_derivative), laplacian=mul(u.laplacian),
                   name=name or f"{factor:g}*{u.name}")


# -- Hamiltonian systems --------------------------------------------------------

def hamiltonian_system(H: ScalarField) -> DiffusionSpec:
    """Noise-free diffusion with drift ``J grad H`` and Jacobian ``J Hess H``."""
    if H.dim % 2:
        raise ValueError(f"Hamiltonian systems need even dimension, got {H.dim}")
    j = standard_symplectic_matrix(H.dim)

    def value(x, t):
        return np.einsum("ij,...j->...i", j, H.grad(x, t))

    def jacobian(x, t):
        return j @ H.hess(x, t)

    return DiffusionSpec(VectorField(H.dim, value, jacobian, name=f"X[{H.name}]"), (),
                         name=f"hamiltonian({H.name})")


def pendulum_hamiltonian(d: int = 1) -> ScalarField:
    """``H = |p|^2 / 2 + sum_i cos q_i`` on ``R^{2d}``."""
    def value(x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x[..., d:] ** 2, axis=-1) + np.sum(np.cos(x[..., :d]), axis=-1)

    def gradient(x, t):
        x = np.asarray(x, dtype=float)
        return np.concatenate([-np.sin(x[..., :d]), x[..., d:]], axis=-1)

    def hessian(x, t):
        x = np.asarray(x, dtype=float)
        h = np.zeros(x.shape[:-1] + (2 * d, 2 * d))
        for i in range(d):
            h[..., i, i] = -np.cos(x[..., i])
            h[..., d + i, d + i] = 1.0
        return h

    return ScalarField(2 * d, value, gradient, hessian, name="pendulum")


def quadratic_hamiltonian(n: int) -> ScalarField:
    """``H = |x|^2 / 2`` (harmonic oscillator)."""
    def value(x, t):
        return 0.5 * np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)

    def hessian(x, t):
        return np.broadcast_to(np.eye(n), np.shape(x)[:-1] + (n, n)).copy()

    return ScalarField(n, value, lambda x, t: np.asarray(x, dtype=float), hessian,
                       name="harmonic")


# -- residual validators --------------------------------------------------------

def _residual(u: VelocityField, probes, t: float, sign: float) -> dict:
    probes = np.asarray(probes, dtype=float)
    if u.pressure_gradient is None:
        return {"validated": False, "momentum": float("nan"), "divergence": float("nan"),
                "reason": "missing pressure gradient"}
    v, du = u.value_and_jac(probes, t)
    r = (u.u_t(probes, t) + np.einsum("...ij,...j->...i", du, v)
         + u.pressure_gradient(probes, t) + sign * u.nu * u.lap(probes, t))
    div = np.trace(du, axis1=-2, axis2=-1)
    return {"validated": True,
            "momentum": float(np.max(np.linalg.norm(r, axis=-1))),
            "divergence": float(np.max(np.abs(div)))}


def residual_navier_stokes(u: VelocityField, probes, t: float = 0.0) -> dict:
    """Max over probes of ``|u_t + (Du)u + grad P - nu lap u|`` and ``|div u|``."""
    return _residual(u, probes, t, -1.0)


def residual_backward_ns(w: VelocityField, probes, t: float = 0.0) -> dict:
    """Same as :func:`residual_navier_stokes` with ``+ nu lap w``."""
    return _residual(w, probes, t, +1.0)


def max_residual(report: dict) -> float:
    if not report["validated"]:
        return float("inf")
    return max(report["momentum"], report["divergence"])


# -- catalog --------------------------------------------------------------------

def _corrupted_tg(nu=0.0):
    return taylor_green_2d(nu, amplitude=1.1, pressure_scale=1.0, name="corrupted-taylor-green")


def _frozen_tg(nu=0.0):
    return taylor_green_2d(nu, decay=0.0, name="frozen-taylor-green")


CATALOG: dict = {
    "corrupted-taylor-green": _corrupted_tg,
    "double-rotation-4d": lambda nu=0.0: double_rotation_4d().with_viscosity(nu),
    "frozen-taylor-green": _frozen_tg,
    "overtwisted-3d": lambda nu=0.0: axisymmetric_steady(OVERTWISTED, name="overtwisted-3d").with_viscosity(nu),
    "rigid-rotation-3d": lambda nu=0.0: rigid_rotation_3d().with_viscosity(nu),
    "taylor-green-2d": lambda nu=0.0: taylor_green_2d(nu),
    "taylor-green-3d": lambda nu=0.0: embed_2d_in_3d(taylor_green_2d(nu)),
    "twisted-3d": lambda nu=0.0: axisymmetric_steady(TWISTED, name="twisted-3d").with_viscosity(nu),
}


def get_field(field_id: str, nu: float = 0.0) -> VelocityField:
    try:
        factory = CATALOG[field_id]
    except KeyError:
        raise KeyError(f"unknown field id {field_id!r}; known: {sorted(CATALOG)}") from None
    return factory(nu=nu)
