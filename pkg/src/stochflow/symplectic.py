"""Symplectic criteria for diffusions on R^{2d} with the standard form.

Coordinates are ``x = (q, p)`` and the form has matrix ``J``.  A diffusion is
strongly symplectic when every field preserves the form, and weakly
symplectic when its generator annihilates it (the pulled-back form is then a
martingale).  For noise of the shape ``(A_j(q,p), B_j(q,p))`` the weak
criterion reduces to the vanishing of two vectors ``Z1, Z2``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import stats
from .circulation import Loop, transported_line_integral
from .fieldlib import ScalarField, VelocityField, bernoulli, hamiltonian_system
from .flow import DiffusionSpec, ensemble
from .geometry import (Array, VectorField, antisym, bilinear, c_operator, exterior_derivative,
                       fd_derivative, generator_two_form, lie_derivative_two_form,
                       standard_symplectic, standard_symplectic_matrix)

#: tolerance for criteria computed from analytic first derivatives
TOL_STRONG = 1e-5
#: tolerance for criteria that need finite-difference second derivatives
TOL_WEAK = 1e-3


def _half(n: int) -> int:
    if n % 2:
        raise ValueError(f"symplectic criteria need an even dimension, got {n}")
    return n // 2


# -- noise of the canonical shape -----------------------------------------------

@dataclass(frozen=True)
class MatrixField:
    """Matrix-valued coefficient ``M(x, t)`` of shape ``(..., d, k)``.

    ``derivative(x, t)[..., r, j, l] = d M[r, j] / d x_l``; finite differences
    are used when it is absent.
    """

    value: Callable[[Array, float], Array]
    derivative: Optional[Callable[[Array, float], Array]] = None

    def __call__(self, x, t=0.0):
        return self.value(x, t)

    def deriv(self, x, t=0.0):
        if self.derivative is not None:
            return self.derivative(x, t)
        return fd_derivative(self.value, np.asarray(x, dtype=float), t)


def constant_matrix(m) -> MatrixField:
    m = np.asarray(m, dtype=float)

    def value(x, t):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(m, x.shape[:-1] + m.shape).copy()

    def derivative(x, t):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + m.shape + (x.shape[-1],))

    return MatrixField(value, derivative)


@dataclass(frozen=True)
class CanonicalNoiseSystem:
    """Ito diffusion ``dq = H_p dt + A dW``, ``dp = -H_q dt + B dW`` on ``R^{2d}``.

    ``A`` and ``B`` are ``d x k`` matrix fields of the full state ``x = (q, p)``.
    """

    hamiltonian: ScalarField
    A: MatrixField
    B: MatrixField
    k: int
    name: str = ""
    strat_drift: Optional[VectorField] = None

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    def noise_fields(self) -> tuple:
        """Columns ``V_j = (A_j, B_j)`` as vector fields with Jacobians."""
        out = []
        for j in range(self.k):
            def value(x, t, j=j):
                return np.concatenate([self.A(x, t)[..., j], self.B(x, t)[..., j]], axis=-1)

            def jacobian(x, t, j=j):
                return np.concatenate([self.A.deriv(x, t)[..., j, :],
                                       self.B.deriv(x, t)[..., j, :]], axis=-2)

            out.append(VectorField(self.dim, value, jacobian, name=f"V{j + 1}"))
        return tuple(out)

    def hamiltonian_field(self) -> VectorField:
        return hamiltonian_system(self.hamiltonian).drift

    def spec(self) -> DiffusionSpec:
        """Stratonovich form of the Ito system."""
        if self.strat_drift is not None:
            return DiffusionSpec(self.strat_drift, self.noise_fields(), self.name)
        return DiffusionSpec.from_ito(self.hamiltonian_field(), self.noise_fields(), self.name)

    def z_vectors(self, x, t: float = 0.0) -> tuple:
        return z_vectors(self.A, self.B, x, t)


def z_vectors(A: MatrixField, B: MatrixField, x, t: float = 0.0) -> tuple:
    """``Z1^i = sum_{r,j} (dA^r_j/dq_i B^r_j - dB^r_j/dq_i A^r_j)`` and ``Z2`` with ``p_i``.

    Returns arrays of shape ``(..., d)``.
    """
    x = np.asarray(x, dtype=float)
    d = _half(x.shape[-1])
    a, b = A(x, t), B(x, t)
    if a.shape != b.shape or a.shape[-2] != d:
        raise ValueError("A and B must both be d x k")
    da, db = A.deriv(x, t), B.deriv(x, t)
    z = np.einsum("...rjl,...rj->...l", da, b) - np.einsum("...rjl,...rj->...l", db, a)
    return z[..., :d], z[..., d:]


def gamma_system(H: ScalarField, gamma: Callable, dgamma: Optional[Callable], nu: float,
                 name: str = "") -> CanonicalNoiseSystem:
    """Noise ``A = sqrt(2 nu) I``, ``B = sqrt(2 nu) Gamma(q)`` with ``Gamma`` a ``d x d`` field of ``q``.

    ``gamma(q, t)`` has shape ``(..., d, d)`` and ``dgamma(q, t)`` shape
    ``(..., d, d, d)`` (last axis: derivative in ``q``).
    """
    d = _half(H.dim)
    s = np.sqrt(2.0 * nu)

    def b_value(x, t):
        return s * gamma(np.asarray(x)[..., :d], t)

    def b_deriv(x, t):
        x = np.asarray(x, dtype=float)
        if dgamma is None:
            dq = fd_derivative(lambda q, tt: gamma(q, tt), x[..., :d], t)
        else:
            dq = dgamma(x[..., :d], t)
        return s * np.concatenate([dq, np.zeros(dq.shape[:-1] + (d,))], axis=-1)

    def divcol(q, t):
        dq = dgamma(q, t) if dgamma is not None else fd_derivative(gamma, q, t)
        return np.einsum("...ijj->...i", dq)

    # Ito correction of the noise (e_j, Gamma e_j) is nu * (0, sum_j d_j Gamma[:, j])
    hf = hamiltonian_system(H).drift

    def drift(x, t):
        x = np.asarray(x, dtype=float)
        out = hf.value(x, t)
        out[..., d:] -= nu * divcol(x[..., :d], t)
        return out

    def drift_jac(x, t):
        x = np.asarray(x, dtype=float)
        out = hf.jac(x, t)
        out[..., d:, :d] -= nu * fd_derivative(divcol, x[..., :d], t)
        return out

    strat = VectorField(2 * d, drift, drift_jac, name=f"strat[{name}]")
    return CanonicalNoiseSystem(H, constant_matrix(s * np.eye(d)), MatrixField(b_value, b_deriv),
                                d, name, strat)


def velocity_gradient_system(H: ScalarField, w: VelocityField, nu: float,
                             t_shift: float = 0.0) -> CanonicalNoiseSystem:
    """Gamma system with ``Gamma = Dw`` (so ``tr Gamma = div w = 0``)."""
    return gamma_system(H, lambda q, t: w.jac(q, t + t_shift),
                        lambda q, t: w.hess(q, t + t_shift), nu, name=f"Gamma=D{w.name}")


def sin_gamma_system(H: ScalarField, nu: float) -> CanonicalNoiseSystem:
    """Gamma = diag(sin q1, 0, ...); its trace depends on ``q``."""
    d = _half(H.dim)

    def gamma(q, t):
        out = np.zeros(q.shape[:-1] + (d, d))
        out[..., 0, 0] = np.sin(q[..., 0])
        return out

    def dgamma(q, t):
        out = np.zeros(q.shape[:-1] + (d, d, d))
        out[..., 0, 0, 0] = np.cos(q[..., 0])
        return out

    return gamma_system(H, gamma, dgamma, nu, name="Gamma=diag(sin q1)")


def cos_sin_system(H: ScalarField, scale: float = np.sqrt(0.2)) -> CanonicalNoiseSystem:
    """One noise column ``A = (s cos p1, 0, ...)``, ``B = (s sin q1, 0, ...)``.

    Here ``Z1 = (-s^2 cos p1 cos q1, 0, ...)`` and ``Z2 = (-s^2 sin p1 sin q1, 0, ...)``;
    ``(Z1, Z2)`` is not a gradient, so the generator does not vanish.
    """
    d = _half(H.dim)
    s = float(scale)

    def a_value(x, t):
        out = np.zeros(np.shape(x)[:-1] + (d, 1))
        out[..., 0, 0] = s * np.cos(x[..., d])
        return out

    def a_deriv(x, t):
        out = np.zeros(np.shape(x)[:-1] + (d, 1, 2 * d))
        out[..., 0, 0, d] = -s * np.sin(x[..., d])
        return out

    def b_value(x, t):
        out = np.zeros(np.shape(x)[:-1] + (d, 1))
        out[..., 0, 0] = s * np.sin(x[..., 0])
        return out

    def b_deriv(x, t):
        out = np.zeros(np.shape(x)[:-1] + (d, 1, 2 * d))
        out[..., 0, 0, 0] = s * np.cos(x[..., 0])
        return out

    return CanonicalNoiseSystem(H, MatrixField(a_value, a_deriv), MatrixField(b_value, b_deriv),
                                1, name="cos-sin")


def potential_hamiltonian(pressure: Callable, pressure_gradient: Callable, d: int,
                          name: str = "") -> ScalarField:
    """``H = |p|^2 / 2 + P(q)``."""

    def value(x, t):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x[..., d:] ** 2, axis=-1) + pressure(x[..., :d], t)

    def gradient(x, t):
        x = np.asarray(x, dtype=float)
        return np.concatenate([pressure_gradient(x[..., :d], t), x[..., d:]], axis=-1)

    return ScalarField(2 * d, value, gradient, name=name)


# -- drift correction -------------------------------------------------------------

def corrected_drift(H: ScalarField, fields: Sequence[VectorField]) -> VectorField:
    """Stratonovich drift ``J grad H + 1/2 sum_j J C(J V_j) V_j`` making the diffusion weakly symplectic."""
    n = H.dim
    _half(n)
    J = standard_symplectic_matrix(n)
    fields = tuple(fields)

    def value(x, t):
        out = np.einsum("ij,...j->...i", J, H.grad(x, t))
        for v in fields:
            val, dv = v.value_and_jac(x, t)
            jdv = np.einsum("ij,...jk->...ik", J, dv)
            cj = antisym(jdv)
            out = out + 0.5 * np.einsum("ij,...jk,...k->...i", J, cj, val)
        return out

    return VectorField(n, value, name=f"corrected({H.name})")


def corrected_spec(H: ScalarField, fields: Sequence[VectorField], name: str = "") -> DiffusionSpec:
    return DiffusionSpec(corrected_drift(H, fields), tuple(fields), name)


# -- Poincare invariant -----------------------------------------------------------

def poincare_loop_integral(spec: DiffusionSpec, loop: Loop, t: float, h: float = 1e-3) -> float:
    """``oint_{phi_t(gamma)} p . dq`` for a deterministic flow on ``R^{2d}``."""
    return float(poincare_series(spec, loop, t, h)["values"][-1])


def poincare_series(spec: DiffusionSpec, loop: Loop, T: float, h: float = 1e-3,
                    store_every: int = 1) -> dict:
    """Loop integral of ``p . dq`` over time plus the symplecticity defect of ``Lambda``."""
    if spec.k:
        raise ValueError("the Poincare invariant is defined for deterministic flows")
    d = _half(spec.dim)
    if loop.dim != spec.dim:
        raise ValueError("loop and diffusion dimensions differ")

    def coeff(x, t):
        return np.concatenate([x[..., d:], np.zeros_like(x[..., d:])], axis=-1)

    if T == 0:
        from .circulation import loop_circulation
        i0 = loop_circulation(VectorField(spec.dim, coeff), loop)
        return {"times": np.array([0.0]), "values": np.array([i0]), "defect": 0.0}
    times, vals, sample = transported_line_integral(coeff, spec.drift, loop, T, h, store_every)
    J = standard_symplectic_matrix(spec.dim)
    lam = sample.jacobians
    defect = np.max(np.abs(np.swapaxes(lam, -1, -2) @ J @ lam - J))
    return {"times": times, "values": vals, "defect": float(defect),
            "drift": float(np.max(np.abs(vals - vals[0])))}


# -- Liouville transversality -------------------------------------------------------

@dataclass
class LiouvilleReport:
    max_condition: float
    transversality: float
    lie_defect: float
    n_probes: int

    def passed(self, tol_h: float = 1e-6, tol_lie: float = 1e-4) -> bool:
        return self.transversality <= tol_h and self.lie_defect <= tol_lie


def liouville_field(u: VelocityField, cond_max: float = 1e12) -> VectorField:
    """``X = C(u)^{-1} u``; raises on singular ``C(u)``."""

    def value(x, t):
        c = c_operator(u, x, t)
        _check_invertible(c, cond_max)
        return np.linalg.solve(c, u.value(x, t)[..., None])[..., 0]

    return VectorField(u.dim, value, name=f"X[{u.name}]")


def _check_invertible(c: Array, cond_max: float) -> Array:
    cond = np.linalg.cond(c)
    if not np.all(np.isfinite(cond)) or np.any(cond > cond_max):
        raise np.linalg.LinAlgError("C(u) is singular at some probe")
    return cond


def liouville_check(u: VelocityField, probes, t: float = 0.0,
                    H: Optional[ScalarField] = None) -> LiouvilleReport:
    """Check ``X . grad H = |u|^2`` and ``L_X dalpha = dalpha`` for ``X = C(u)^{-1} u``.

    ``H`` defaults to the Bernoulli function ``P + |u|^2 / 2``.
    """
    _half(u.dim)
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    H = bernoulli(u) if H is None else H
    cond = _check_invertible(c_operator(u, probes, t), 1e12)
    X = liouville_field(u)
    xv = X.value(probes, t)
    v = u.value(probes, t)
    trans = np.abs(np.einsum("...i,...i->...", xv, H.grad(probes, t)) - np.sum(v * v, axis=-1))
    beta = exterior_derivative(u)
    lie = lie_derivative_two_form(beta, X).matrix(probes, t) - beta.matrix(probes, t)
    return LiouvilleReport(float(np.max(cond)), float(np.max(trans)),
                           float(np.max(np.abs(lie))), len(probes))


# -- classification -----------------------------------------------------------------

@dataclass
class SymplecticDiffusionReport:
    """Pointwise symplectic criteria over a probe set.

    The probes are a finite proxy for the "for all x" statements.
    """

    name: str
    n_probes: int
    lie_norms: list
    generator_norm: float
    verdict: str
    tolerance_strong: float
    tolerance_weak: float
    z1: Optional[list] = None
    z2: Optional[list] = None
    z_norm: Optional[float] = None
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def lie_norms(spec: DiffusionSpec, probes, t: float = 0.0) -> list:
    """``max_probes |L_{V_i} omega|`` for ``V_0, V_1, ..., V_k``."""
    omega = standard_symplectic(spec.dim)
    out = []
    for v in (spec.drift,) + spec.diffusions:
        out.append(float(np.max(np.abs(lie_derivative_two_form(omega, v).matrix(probes, t)))))
    return out


def generator_norm(spec: DiffusionSpec, probes, t: float = 0.0) -> float:
    omega = standard_symplectic(spec.dim)
    return float(np.max(np.abs(generator_two_form(spec, omega).matrix(probes, t))))


def classify(system, probes, t: float = 0.0, tol_strong: float = TOL_STRONG,
             tol_weak: float = TOL_WEAK) -> SymplecticDiffusionReport:
    """Strongly / weakly / not symplectic verdict at the probes.

    ``system`` is a :class:`DiffusionSpec` or a :class:`CanonicalNoiseSystem`.
    The verdict uses the Lie-derivative and generator criteria only.  For a
    canonical system ``Z1, Z2`` are reported alongside, with
    ``detail["z_criterion_agrees"]`` telling whether ``Z = 0`` gives the same
    answer as the generator; it does not whenever ``Z`` is a nonzero gradient.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    spec = system.spec() if isinstance(system, CanonicalNoiseSystem) else system
    _half(spec.dim)
    norms = lie_norms(spec, probes, t)
    gen = generator_norm(spec, probes, t)
    z1 = z2 = zn = None
    detail = {}
    if isinstance(system, CanonicalNoiseSystem):
        a, b = system.z_vectors(probes, t)
        z1, z2 = a.tolist(), b.tolist()
        zn = float(np.max(np.linalg.norm(a, axis=-1) + np.linalg.norm(b, axis=-1)))
        detail["z_criterion_agrees"] = (zn <= tol_strong) == (gen <= tol_weak)
    if max(norms) <= tol_strong:
        verdict = "strongly"
    elif gen <= tol_weak:
        verdict = "weakly"
    else:
        verdict = "not"
    return SymplecticDiffusionReport(spec.name, len(probes), norms, gen, verdict,
                                     tol_strong, tol_weak, z1, z2, zn, detail)


# -- randomised canonical-shape systems ---------------------------------------------

def random_polynomial_system(rng: np.random.Generator, d: int = 2, k: int = 2,
                             constant_trace: bool = False, scale: float = 0.5,
                             name: str = "") -> CanonicalNoiseSystem:
    """Noise with quadratic-polynomial coefficients in ``x = (q, p)``.

    ``A`` and ``B`` are independent random quadratics.  With
    ``constant_trace`` the system instead has ``A = c I`` and
    ``B = c Gamma(q)`` with a random quadratic ``Gamma`` whose trace is
    forced constant, which makes ``Z1 = Z2 = 0``.
    """
    n = 2 * d
    H = _random_quadratic_hamiltonian(rng, n)
    if constant_trace:
        c = scale * (1.0 + rng.random())
        g0, g1, g2 = _random_quadratic_coeffs(rng, d, d, d, scale)
        # remove the q-dependent part of the trace from the (0, 0) entry
        tr1 = np.einsum("iil->l", g1)
        tr2 = np.einsum("iilm->lm", g2)
        g1[0, 0] -= tr1
        g2[0, 0] -= tr2
        gam = _quadratic_matrix(g0, g1, g2)
        return gamma_system(H, lambda q, t: gam.value(q, t), lambda q, t: gam.deriv(q, t),
                            0.5 * c * c, name=name or "random-constant-trace")
    a = _quadratic_matrix(*_random_quadratic_coeffs(rng, d, k, n, scale))
    b = _quadratic_matrix(*_random_quadratic_coeffs(rng, d, k, n, scale))
    return CanonicalNoiseSystem(H, a, b, k, name=name or "random-polynomial")


def _random_quadratic_coeffs(rng, rows, cols, nvar, scale=0.5):
    g0 = scale * rng.standard_normal((rows, cols))
    g1 = scale * rng.standard_normal((rows, cols, nvar))
    g2 = scale * rng.standard_normal((rows, cols, nvar, nvar)) / 2
    g2 = 0.5 * (g2 + np.swapaxes(g2, -1, -2))
    return g0, g1, g2


def _quadratic_matrix(g0, g1, g2) -> MatrixField:
    """``M(y) = g0 + g1 y + y^T g2 y`` entrywise, for ``y`` the leading ``nvar`` coordinates."""
    nvar = g1.shape[-1]

    def value(x, t):
        y = np.asarray(x, dtype=float)[..., :nvar]
        return (g0 + np.einsum("rjl,...l->...rj", g1, y)
                + np.einsum("rjlm,...l,...m->...rj", g2, y, y))

    def derivative(x, t):
        x = np.asarray(x, dtype=float)
        y = x[..., :nvar]
        dy = g1 + 2 * np.einsum("rjlm,...m->...rjl", g2, y)
        pad = x.shape[-1] - nvar
        if pad:
            dy = np.concatenate([dy, np.zeros(dy.shape[:-1] + (pad,))], axis=-1)
        return dy

    return MatrixField(value, derivative)


def _random_quadratic_hamiltonian(rng, n) -> ScalarField:
    s = rng.standard_normal((n, n))
    s = 0.5 * (s + s.T)
    g = rng.standard_normal(n)

    def value(x, t):
        return 0.5 * np.einsum("...i,ij,...j->...", x, s, x) + x @ g

    def gradient(x, t):
        return np.einsum("ij,...j->...i", s, x) + g

    def hessian(x, t):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(s, x.shape[:-1] + (n, n)).copy()

    return ScalarField(n, value, gradient, hessian, name="random-quadratic")


def equivalence_case(system: CanonicalNoiseSystem, probes, t: float = 0.0,
                     tol_z: float = TOL_STRONG, tol_gen: float = TOL_WEAK) -> dict:
    """Compare the ``Z``-criterion with the generator criterion on one system."""
    a, b = system.z_vectors(probes, t)
    zn = float(np.max(np.linalg.norm(a, axis=-1) + np.linalg.norm(b, axis=-1)))
    gen = generator_norm(system.spec(), probes, t)
    return {"name": system.name, "z_norm": zn, "generator_norm": gen,
            "z_pass": zn <= tol_z, "generator_pass": gen <= tol_gen,
            "agree": (zn <= tol_z) == (gen <= tol_gen)}


# -- flow-level test ----------------------------------------------------------------

@dataclass
class FormMartingaleResult:
    """Monte Carlo means of ``omega_t(x; v1, v2) = omega(Lambda v1, Lambda v2)`` per tangent pair."""

    times: Array
    initial: Array
    mean: Array
    se: Array
    z: Array
    generator: Array
    slope: Array
    slope_se: Array

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def slope_relative_error(self) -> float:
        """``|slope - generator| / |generator|`` over the vector of pairs; inf if the generator is 0."""
        g = np.linalg.norm(self.generator)
        d = np.linalg.norm(self.slope - self.generator)
        return float(d / g) if g > 0 else float("inf")

    def to_dict(self) -> dict:
        d = {k: np.asarray(v).tolist() for k, v in asdict(self).items()}
        d["max_abs_z"] = self.max_abs_z
        d["slope_relative_error"] = self.slope_relative_error()
        return d


def form_martingale_test(spec: DiffusionSpec, pairs: Sequence, T: float,
                         checkpoints: Sequence[float], n_samples: int, h: float,
                         master_seed: int, slope_time: Optional[float] = None,
                         workers: Optional[int] = None) -> FormMartingaleResult:
    """Simulate the flow from the base points of ``pairs`` and test ``E omega_t = omega``.

    ``pairs`` is a sequence of :class:`stochflow.geometry.TangentPair`; all base
    points of one sample share its noise.  The time slope of the mean at
    ``t = 0`` is estimated from the first checkpoint (or ``slope_time``) with a
    paired standard error and compared with the generator.
    """
    n = spec.dim
    _half(n)
    base = np.stack([p.base for p in pairs])
    v1 = np.stack([p.v1 for p in pairs])
    v2 = np.stack([p.v2 for p in pairs])
    J = standard_symplectic_matrix(n)
    cps = list(checkpoints)
    st = slope_time if slope_time is not None else cps[0]
    all_cps = sorted(set(cps) | {st})
    res = ensemble(spec, base, n_samples, h, T if T >= max(all_cps) else max(all_cps),
                   all_cps, master_seed, workers=workers)
    lam = res.jacobians[res.kept]
    omega = bilinear(J, np.einsum("...ij,...j->...i", lam, v1[None, None]),
                     np.einsum("...ij,...j->...i", lam, v2[None, None]))
    initial = bilinear(J, v1, v2)
    diffs = omega - initial[None, None]
    mean_d, se = stats.mean_se(diffs)
    z = stats.z_score(mean_d, se)
    sel = [all_cps.index(c) for c in cps]
    si = all_cps.index(st)
    gen = bilinear(generator_two_form(spec, standard_symplectic(n)).matrix(base, 0.0), v1, v2)
    return FormMartingaleResult(np.array(cps), initial, (mean_d + initial)[sel], se[sel], z[sel],
                                gen, mean_d[si] / st, se[si] / st)
