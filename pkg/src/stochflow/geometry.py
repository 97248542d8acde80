"""Differential forms on R^n represented by coefficient arrays.

A 1-form ``alpha = u . dx`` is stored through its coefficient field ``u``; a
2-form ``beta`` through an antisymmetric matrix field ``W`` with
``beta(x; v1, v2) = W(x) v1 . v2``.  Every callable takes a point array of
shape ``(..., n)`` and a scalar time and is evaluated batch-wise, so a whole
ensemble of probe points goes through a single call.

Coordinates on phase space are ordered ``x = (q_1..q_d, p_1..p_d)`` and the
standard symplectic form has matrix ``J = [[0, I], [-I, 0]]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray
FieldFn = Callable[[Array, float], Array]

#: nested differencing step used for derivatives of already-differentiated data
NESTED_STEP = 1e-4


def fd_step(x: Array) -> Array:
    """Central-difference step ``max(1e-5, 1e-5 |x_k|)`` per coordinate."""
    return np.maximum(1e-5, 1e-5 * np.abs(x))


def fd_derivative(fn: FieldFn, x: Array, t: float = 0.0,
                  step: Optional[float] = None) -> Array:
    """Central-difference derivative of ``fn`` with respect to ``x``.

    The result has shape ``fn(x, t).shape + (n,)``; the trailing axis is the
    differentiation direction.  ``step`` fixes a uniform step (used for
    nested differencing); otherwise :func:`fd_step` is used.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    cols = []
    for k in range(n):
        xp = x.copy()
        xm = x.copy()
        hk = fd_step(x[..., k]) if step is None else step
        xp[..., k] = x[..., k] + hk
        xm[..., k] = x[..., k] - hk
        fp = np.asarray(fn(xp, t))
        fm = np.asarray(fn(xm, t))
        width = xp[..., k] - xm[..., k]
        width = width.reshape(width.shape + (1,) * (fp.ndim - width.ndim))
        cols.append((fp - fm) / width)
    return np.stack(cols, axis=-1)


def antisym(m: Array) -> Array:
    """``M - M^T`` over the last two axes."""
    return m - np.swapaxes(m, -1, -2)


def bilinear(w: Array, v1: Array, v2: Array) -> Array:
    """Evaluate ``W v1 . v2`` batch-wise for antisymmetric ``W``.

    Written as ``(W v1 . v2 - W v2 . v1) / 2`` so that swapping the
    arguments flips the sign exactly, not just to round-off.
    """
    a = np.einsum("...i,...ij,...j->...", v2, w, v1)
    b = np.einsum("...i,...ij,...j->...", v1, w, v2)
    return 0.5 * (a - b)


def _check_dim(x: Array, dim: int) -> Array:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dim:
        raise ValueError(f"point has dimension {x.shape[-1]}, field expects {dim}")
    return x


@dataclass(frozen=True)
class Point:
    """A single point of R^n."""

    coords: Array

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).reshape(-1)
        if c.size < 1 or not np.all(np.isfinite(c)):
            raise ValueError("Point needs at least one finite coordinate")
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.size


@dataclass(frozen=True)
class TangentPair:
    """Base point with two tangent vectors, used to probe 2-forms."""

    base: Array
    v1: Array
    v2: Array

    def __post_init__(self):
        for name in ("base", "v1", "v2"):
            a = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, a)
        if not (self.base.shape == self.v1.shape == self.v2.shape):
            raise ValueError("base, v1 and v2 must share a shape")


@dataclass(frozen=True)
class VectorField:
    """Time-dependent vector field with an optional analytic Jacobian.

    ``jacobian(x, t)[..., i, j] = d value_i / d x_j``.  ``hessian`` (optional)
    returns ``H[..., i, j, k] = d^2 value_i / dx_j dx_k``.  ``both`` may supply
    value and Jacobian in one call when they share expensive subexpressions.
    """

    dim: int
    value: FieldFn
    jacobian: Optional[FieldFn] = None
    hessian: Optional[FieldFn] = None
    both: Optional[Callable[[Array, float], tuple]] = None
    constant: bool = False
    name: str = ""
    nested: bool = field(default=False, compare=False)

    def __call__(self, x: Array, t: float = 0.0) -> Array:
        return self.value(x, t)

    @property
    def analytic(self) -> bool:
        return self.jacobian is not None or self.constant

    def jac(self, x: Array, t: float = 0.0) -> Array:
        if self.jacobian is not None:
            return self.jacobian(x, t)
        if self.constant:
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape + (self.dim,))
        return fd_derivative(self.value, x, t, step=NESTED_STEP if self.nested else None)

    def hess(self, x: Array, t: float = 0.0) -> Array:
        if self.hessian is not None:
            return self.hessian(x, t)
        if self.constant:
            x = np.asarray(x, dtype=float)
            return np.zeros(x.shape + (self.dim, self.dim))
        return fd_derivative(self.jac, x, t, step=None if self.jacobian else NESTED_STEP)

    def value_and_jac(self, x: Array, t: float = 0.0) -> tuple:
        if self.both is not None:
            return self.both(x, t)
        return self.value(x, t), self.jac(x, t)


def constant_field(vec, name: str = "") -> VectorField:
    """Spatially constant vector field."""
    vec = np.asarray(vec, dtype=float)
    n = vec.size

    def value(x, t):
        x = np.asarray(x)
        return np.broadcast_to(vec, x.shape[:-1] + (n,)).copy()

    return VectorField(n, value, constant=True, name=name)


def linear_field(a, name: str = "") -> VectorField:
    """``V(x) = A x``."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]

    def value(x, t):
        return np.einsum("ij,...j->...i", a, x)

    def jacobian(x, t):
        x = np.asarray(x)
        return np.broadcast_to(a, x.shape[:-1] + (n, n)).copy()

    def hessian(x, t):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1] + (n, n, n))

    return VectorField(n, value, jacobian, hessian, name=name)


class OneFormField(VectorField):
    """1-form ``alpha = coeff(x, t) . dx``; the coefficient is a vector field."""

    @property
    def coeff(self) -> FieldFn:
        return self.value

    @property
    def coeff_jacobian(self) -> FieldFn:
        return self.jac

    @classmethod
    def of(cls, v: VectorField) -> "OneFormField":
        """View a vector field as the coefficient of a 1-form."""
        return cls(v.dim, v.value, v.jacobian, v.hessian, v.both, v.constant, v.name, v.nested)

    def evaluate(self, x: Array, v: Array, t: float = 0.0) -> Array:
        return np.einsum("...i,...i->...", self.value(x, t), v)


@dataclass(frozen=True)
class TwoFormField:
    """2-form with antisymmetric coefficient matrix ``W(x, t)``.

    ``derivative(x, t)[..., i, j, k] = d W_ij / d x_k`` when known
    analytically.  ``closed`` marks forms built as exterior derivatives,
    constants, or Lie derivatives of closed forms.
    """

    dim: int
    matrix: FieldFn
    derivative: Optional[FieldFn] = None
    closed: bool = True
    name: str = ""
    nested: bool = field(default=False, compare=False)

    def __call__(self, x: Array, t: float = 0.0) -> Array:
        return self.matrix(x, t)

    def deriv(self, x: Array, t: float = 0.0) -> Array:
        if self.derivative is not None:
            return self.derivative(x, t)
        return fd_derivative(self.matrix, x, t, step=NESTED_STEP if self.nested else None)

    def evaluate(self, x: Array, v1: Array, v2: Array, t: float = 0.0) -> Array:
        return bilinear(self.matrix(x, t), v1, v2)


def c_operator(u: VectorField, x: Array, t: float = 0.0) -> Array:
    """Antisymmetrised gradient ``Du - Du^T`` (matrix of ``d(u . dx)``)."""
    x = _check_dim(x, u.dim)
    return antisym(u.jac(x, t))


def standard_symplectic_matrix(n: int) -> Array:
    if n % 2:
        raise ValueError(f"standard symplectic form needs even dimension, got {n}")
    d = n // 2
    j = np.zeros((n, n))
    j[:d, d:] = np.eye(d)
    j[d:, :d] = -np.eye(d)
    return j


def standard_symplectic(n: int) -> TwoFormField:
    """Constant form with matrix ``J``; ``omega(v1, v2) = J v1 . v2``."""
    j = standard_symplectic_matrix(n)

    def matrix(x, t):
        x = np.asarray(x)
        return np.broadcast_to(j, x.shape[:-1] + (n, n)).copy()

    def derivative(x, t):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1] + (n, n, n))

    return TwoFormField(n, matrix, derivative, closed=True, name="omega_bar")


def exterior_derivative(u: VectorField) -> TwoFormField:
    """``d(u . dx)`` with matrix ``C(u) = Du - Du^T``."""
    n = u.dim

    def matrix(x, t):
        return c_operator(u, x, t)

    derivative = None
    if u.hessian is not None or u.constant:
        def derivative(x, t):
            h = u.hess(x, t)
            return h - np.swapaxes(h, -3, -2)

    return TwoFormField(n, matrix, derivative, closed=True, name=f"d({u.name})")


def contraction(beta: TwoFormField, v: VectorField) -> OneFormField:
    """Interior product ``i_V beta``: coefficient ``c = W V`` so ``c . w = beta(V, w)``."""
    if beta.dim != v.dim:
        raise ValueError("contraction: dimension mismatch")

    def coeff(x, t):
        return np.einsum("...ij,...j->...i", beta.matrix(x, t), v.value(x, t))

    def coeff_jac(x, t):
        w = beta.matrix(x, t)
        dw = beta.deriv(x, t)
        val, dv = v.value_and_jac(x, t)
        return np.einsum("...ijk,...j->...ik", dw, val) + w @ dv

    return OneFormField(v.dim, coeff, coeff_jac, name=f"i_{v.name}{beta.name}")


def lie_derivative_two_form(beta: TwoFormField, v: VectorField) -> TwoFormField:
    """Lie derivative of a closed 2-form, ``L_V beta = d(i_V beta)``.

    The derivative of the result is taken by nested central differences.
    """
    if not beta.closed:
        raise NotImplementedError("Lie derivative implemented for closed 2-forms only")
    ivb = contraction(beta, v)

    def matrix(x, t):
        return antisym(ivb.jac(x, t))

    return TwoFormField(v.dim, matrix, None, closed=True, nested=True,
                        name=f"L_{v.name}{beta.name}")


def pullback_two_form(beta: TwoFormField, phi_x: Array, jac: Array, t: float = 0.0) -> Array:
    """Matrix of ``phi^* beta`` at ``x``: ``Lambda^T W(phi(x)) Lambda``.

    Evaluate it on tangent vectors with :func:`bilinear`.
    """
    w = beta.matrix(phi_x, t)
    return np.swapaxes(jac, -1, -2) @ w @ jac


def lie_derivative_one_form(alpha: VectorField, v: VectorField) -> OneFormField:
    """Cartan formula for ``L_V alpha`` with ``alpha = u . dx``.

    Coefficient ``grad(u . V) + C(u) V``; the gradient of the scalar is taken
    by central differences.
    """
    if alpha.dim != v.dim:
        raise ValueError("Lie derivative: dimension mismatch")

    def pairing(x, t):
        return np.einsum("...i,...i->...", alpha.value(x, t), v.value(x, t))

    def coeff(x, t):
        grad = fd_derivative(pairing, x, t)
        return grad + np.einsum("...ij,...j->...i", c_operator(alpha, x, t), v.value(x, t))

    return OneFormField(v.dim, coeff, None, name=f"L_{v.name}{alpha.name}", nested=True)


def generator_two_form(spec, beta: TwoFormField) -> TwoFormField:
    """``A_V beta = L_{V0} beta + 1/2 sum_i L_{Vi} L_{Vi} beta`` for a Stratonovich diffusion.

    ``spec`` needs ``drift`` and ``diffusions`` attributes (see
    :class:`stochflow.flow.DiffusionSpec`).
    """
    terms = [lie_derivative_two_form(beta, spec.drift)]
    seconds = [lie_derivative_two_form(lie_derivative_two_form(beta, v), v)
               for v in spec.diffusions]

    def matrix(x, t):
        out = terms[0].matrix(x, t)
        for s in seconds:
            out = out + 0.5 * s.matrix(x, t)
        return out

    return TwoFormField(beta.dim, matrix, None, closed=True, nested=True,
                        name=f"A{beta.name}")


def generator_one_form(spec, alpha: VectorField) -> OneFormField:
    """``A_V alpha`` for a 1-form, via nested Cartan formulas."""
    first = lie_derivative_one_form(alpha, spec.drift)
    seconds = [lie_derivative_one_form(lie_derivative_one_form(alpha, v), v)
               for v in spec.diffusions]

    def coeff(x, t):
        out = first.value(x, t)
        for s in seconds:
            out = out + 0.5 * s.value(x, t)
        return out

    return OneFormField(alpha.dim, coeff, None, name=f"A{alpha.name}", nested=True)


def probe_points(n: int, dim: int, box=(-3.0, 3.0), seed: int = 0) -> Array:
    """``n`` scrambled Halton points in the cube ``box^dim``."""
    from scipy.stats import qmc

    lo, hi = box
    pts = qmc.Halton(d=dim, scramble=True, seed=seed).random(n)
    return lo + (hi - lo) * pts
