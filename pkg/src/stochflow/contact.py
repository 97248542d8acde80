"""Contact geometry of a 1-form ``alpha = u . dx`` on an odd-dimensional space.

The Reeb field ``R`` spans the kernel of ``C(u)`` and is normalised by
``alpha(R) = 1``.  ``C'(u)`` inverts ``C(u)`` from ``u^perp`` onto ``R^perp``.
Extended by zero on ``R`` it does not produce a contact field; extended by
zero on ``u`` (the splitting ``R^n = R^perp + span(u)``) it does, and the
contact vector field of ``H`` is ``X_H = -C'(u) grad H + H R`` with that
extension.  In three dimensions this equals ``u x grad H / (u . xi) + H R``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fieldlib import ScalarField, VelocityField, curl_from_jacobian
from .flow import DiffusionSpec, ensemble
from .geometry import (Array, VectorField, c_operator, generator_one_form,
                       lie_derivative_one_form)

#: relative threshold on |u . xi| in three dimensions
DEGENERACY_3D = 1e-8
#: relative threshold on the second-smallest singular value of C(u)
DEGENERACY_SVD = 1e-6


class DegenerateFrameError(ValueError):
    """The contact frame does not exist at some point."""


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def contact_condition_3d(u: VelocityField, probes, t: float = 0.0) -> dict:
    """Pointwise ``u . xi`` with ``xi = curl u``; flags near-degenerate probes."""
    if u.dim != 3:
        raise ValueError("contact_condition_3d needs d = 3")
    x = np.atleast_2d(np.asarray(probes, dtype=float))
    v, du = u.value_and_jac(x, t)
    xi = curl_from_jacobian(du)
    s = _dot(v, xi)
    scale = np.linalg.norm(v, axis=-1) * np.linalg.norm(xi, axis=-1) + 1e-30
    degenerate = np.abs(s) < DEGENERACY_3D * scale
    return {"values": s, "min_abs": float(np.min(np.abs(s))), "degenerate": degenerate,
            "n_degenerate": int(degenerate.sum())}


def reeb_3d(u: VelocityField, x, t: float = 0.0) -> Array:
    """``R = xi / (u . xi)``; raises :class:`DegenerateFrameError` where ``u . xi`` vanishes."""
    x = np.asarray(x, dtype=float)
    if u.dim != 3:
        raise ValueError("reeb_3d needs d = 3")
    v, du = u.value_and_jac(x, t)
    xi = curl_from_jacobian(du)
    s = _dot(v, xi)
    scale = np.linalg.norm(v, axis=-1) * np.linalg.norm(xi, axis=-1) + 1e-30
    if np.any(np.abs(s) < DEGENERACY_3D * scale):
        raise DegenerateFrameError("u . curl u vanishes at some point")
    return xi / s[..., None]


def _null_direction(c: Array) -> Array:
    """Unit kernel vector of antisymmetric ``c``; raises unless the kernel is a line."""
    _, sv, vh = np.linalg.svd(c)
    if np.any(sv[..., -2] < DEGENERACY_SVD * sv[..., 0]) or np.any(sv[..., 0] == 0):
        raise DegenerateFrameError("kernel of C(u) is not one-dimensional")
    return vh[..., -1, :]


def reeb(u: VectorField, x, t: float = 0.0) -> Array:
    """Reeb field in any odd dimension from the kernel of ``C(u)``."""
    if u.dim % 2 == 0:
        raise ValueError("Reeb fields need an odd dimension")
    x = np.asarray(x, dtype=float)
    k = _null_direction(c_operator(u, x, t))
    s = _dot(u.value(x, t), k)
    if np.any(np.abs(s) < DEGENERACY_3D * np.linalg.norm(u.value(x, t), axis=-1) + 1e-300):
        raise DegenerateFrameError("u is orthogonal to the kernel of C(u)")
    return k / s[..., None]


def _complement(a: Array) -> Array:
    """Orthonormal basis of ``a^perp`` as columns, shape ``(..., n, n-1)``."""
    _, _, vh = np.linalg.svd(a[..., None, :])
    return np.swapaxes(vh[..., 1:, :], -1, -2)


def c_prime(u: VectorField, x, t: float = 0.0, kills: str = "reeb") -> Array:
    """Inverse of ``C(u): u^perp -> R^perp`` extended by zero on ``R`` or on ``u``.

    ``kills="reeb"`` gives ``U (V^T C U)^{-1} V^T`` (so ``C' R = 0``), with
    ``U`` and ``V`` orthonormal bases of ``u^perp`` and ``R^perp``.
    ``kills="u"`` composes it with the projection ``I - u R^T`` onto
    ``R^perp`` along ``u`` (so ``C' u = 0``); this is the extension that
    makes ``-C' grad H + H R`` a contact vector field.
    """
    if u.dim % 2 == 0:
        raise ValueError("C'(u) is defined in odd dimensions")
    if kills not in ("reeb", "u"):
        raise ValueError("kills must be 'reeb' or 'u'")
    x = np.asarray(x, dtype=float)
    c = c_operator(u, x, t)
    r = reeb(u, x, t)
    uv = u.value(x, t)
    ub = _complement(uv)
    vb = _complement(r)
    core = np.swapaxes(vb, -1, -2) @ c @ ub
    out = ub @ np.linalg.solve(core, np.swapaxes(vb, -1, -2))
    if kills == "u":
        proj = np.eye(u.dim) - uv[..., :, None] * r[..., None, :]
        out = out @ proj
    return out


def contact_hamiltonian_field(u: VectorField, H: ScalarField, x, t: float = 0.0) -> Array:
    """``X_H = -C'(u) grad H + H R`` with ``C'`` vanishing on ``u``.

    Satisfies ``alpha(X_H) = H`` and ``L_{X_H} alpha = dH(R) alpha``.
    """
    x = np.asarray(x, dtype=float)
    cp = c_prime(u, x, t, kills="u")
    return (-np.einsum("...ij,...j->...i", cp, H.grad(x, t))
            + H(x, t)[..., None] * reeb(u, x, t))


def contact_hamiltonian_field_3d(u: VelocityField, H: ScalarField, x, t: float = 0.0) -> Array:
    """Three-dimensional form ``u x grad H / (u . xi) + H R``."""
    x = np.asarray(x, dtype=float)
    v, du = u.value_and_jac(x, t)
    xi = curl_from_jacobian(du)
    rho = _dot(v, xi)
    return np.cross(v, H.grad(x, t)) / rho[..., None] + H(x, t)[..., None] * reeb_3d(u, x, t)


def contact_vector_field(u: VectorField, H: ScalarField) -> VectorField:
    """:func:`contact_hamiltonian_field` as a vector field (finite-difference Jacobian)."""
    return VectorField(u.dim, lambda x, t: contact_hamiltonian_field(u, H, x, t),
                       name=f"X[{H.name}]")


def reeb_field(u: VectorField) -> VectorField:
    return VectorField(u.dim, lambda x, t: reeb(u, x, t), name=f"R[{u.name}]")


@dataclass
class ContactFrame:
    """Contact frame data at a batch of points."""

    points: Array
    u: Array
    reeb: Array
    c: Array
    c_prime: Array
    xi: Optional[Array] = None

    @classmethod
    def at(cls, u: VectorField, points, t: float = 0.0) -> "ContactFrame":
        x = np.atleast_2d(np.asarray(points, dtype=float))
        xi = None
        if u.dim == 3:
            xi = curl_from_jacobian(u.jac(x, t))
        return cls(x, u.value(x, t), reeb(u, x, t), c_operator(u, x, t), c_prime(u, x, t), xi)

    @property
    def contact_scalar(self) -> Optional[Array]:
        return None if self.xi is None else _dot(self.u, self.xi)

    def identities(self, n_random: int = 20, seed: int = 0) -> dict:
        """Max defects of the frame identities."""
        out = {
            "alpha_R": float(np.max(np.abs(_dot(self.u, self.reeb) - 1))),
            "C_R": float(np.max(np.abs(np.einsum("...ij,...j->...i", self.c, self.reeb)))),
            "Cprime_R": float(np.max(np.abs(np.einsum("...ij,...j->...i", self.c_prime,
                                                       self.reeb)))),
        }
        if self.xi is not None:
            out["R_cross_xi"] = float(np.max(np.abs(np.cross(self.reeb, self.xi))))
        rng = np.random.default_rng(seed)
        v = rng.standard_normal((n_random,) + self.u.shape)
        uu = self.u / np.linalg.norm(self.u, axis=-1, keepdims=True)
        v = v - _dot(v, uu)[..., None] * uu
        back = np.einsum("...ij,...jk,...k->...i", self.c_prime, self.c, v)
        out["Cprime_C_on_uperp"] = float(np.max(np.abs(back - v)))
        return out


# -- contact diffusions -------------------------------------------------------------

def _proportionality(L: Array, u: Array) -> tuple:
    """Fit ``L ~ g u`` pointwise; returns ``(g, residual, normalized residual, skipped)``."""
    uu = _dot(u, u)
    skip = uu == 0
    safe = np.where(skip, 1.0, uu)
    g = np.where(skip, np.nan, _dot(L, u) / safe)
    res = np.linalg.norm(L - np.where(skip, 0.0, g)[..., None] * u, axis=-1)
    res = np.where(skip, np.nan, res)
    return g, res, res / np.sqrt(safe), skip


@dataclass
class ContactReport:
    """Pointwise proportionality of Lie derivatives to ``alpha`` over a probe set."""

    kind: str
    n_probes: int
    n_skipped: int
    max_residual: list
    max_normalized: list
    fitted: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(r <= self.tolerance for r in self.max_residual)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def strong_contact_check(spec: DiffusionSpec, alpha: VectorField, probes, t: float = 0.0,
                         tol: float = 1e-4) -> ContactReport:
    """Test ``L_{V_i} alpha = g_i alpha`` for the drift and every noise field."""
    x = np.atleast_2d(np.asarray(probes, dtype=float))
    u = alpha.value(x, t)
    res, nres, fitted, skipped = [], [], [], None
    for v in (spec.drift,) + spec.diffusions:
        L = lie_derivative_one_form(alpha, v).value(x, t)
        g, r, nr, skip = _proportionality(L, u)
        skipped = skip
        res.append(float(np.nanmax(r)))
        nres.append(float(np.nanmax(nr)))
        fitted.append(g.tolist())
    return ContactReport("strong", len(x), int(skipped.sum()), res, nres, fitted, tol)


def weak_contact_residual(spec: DiffusionSpec, alpha: VectorField, probes, t: float = 0.0,
                          tol: float = 1e-4) -> ContactReport:
    """Test ``A_V alpha = f alpha`` with ``A_V = L_{V0} + 1/2 sum L_{Vi}^2``."""
    x = np.atleast_2d(np.asarray(probes, dtype=float))
    u = alpha.value(x, t)
    A = generator_one_form(spec, alpha).value(x, t)
    f, r, nr, skip = _proportionality(A, u)
    return ContactReport("weak", len(x), int(skip.sum()), [float(np.nanmax(r))],
                         [float(np.nanmax(nr))], [f.tolist()], tol)


def contact_lie_identity(u: VectorField, H: ScalarField, probes, t: float = 0.0) -> float:
    """Max of ``|L_{X_H} alpha - dH(R) alpha|``."""
    x = np.atleast_2d(np.asarray(probes, dtype=float))
    L = lie_derivative_one_form(u, contact_vector_field(u, H)).value(x, t)
    dhr = _dot(H.grad(x, t), reeb(u, x, t))
    return float(np.max(np.linalg.norm(L - dhr[..., None] * u.value(x, t), axis=-1)))


def pathwise_proportionality(spec: DiffusionSpec, alpha: VectorField, probes, T: float,
                             h: float, n_samples: int, master_seed: int,
                             workers: Optional[int] = None) -> float:
    """Max relative defect of ``phi_T^* alpha = Lambda^T u(phi_T x)`` being parallel to ``u(x)``."""
    x = np.atleast_2d(np.asarray(probes, dtype=float))
    res = ensemble(spec, x, n_samples, h, T, [T], master_seed, workers=workers)
    xt = res.states[res.kept, 0]
    lam = res.jacobians[res.kept, 0]
    pulled = np.einsum("...ji,...j->...i", lam, alpha.value(xt, T))
    u0 = alpha.value(x, 0.0)
    _, r, _, _ = _proportionality(pulled, np.broadcast_to(u0, pulled.shape))
    return float(np.nanmax(r / np.linalg.norm(pulled, axis=-1)))


def perturbation_sweep(spec: DiffusionSpec, alpha: VectorField, perturbation: VectorField,
                       magnitudes: Sequence[float], probes, t: float = 0.0) -> list:
    """Weak-contact residual of the diffusion with ``eps * perturbation`` added to the drift."""
    out = []
    for eps in magnitudes:
        drift = spec.drift

        def value(x, tt, eps=eps, drift=drift):
            return drift.value(x, tt) + eps * perturbation.value(x, tt)

        s = DiffusionSpec(VectorField(spec.dim, value, name=f"{drift.name}+{eps:g}"),
                          spec.diffusions)
        out.append(weak_contact_residual(s, alpha, probes, t).max_residual[0])
    return out


__all__ = [
    "DegenerateFrameError", "contact_condition_3d", "reeb_3d", "reeb", "c_prime",
    "contact_hamiltonian_field", "contact_hamiltonian_field_3d", "contact_vector_field", "reeb_field", "ContactFrame",
    "ContactReport", "strong_contact_check", "weak_contact_residual", "contact_lie_identity",
    "pathwise_proportionality", "perturbation_sweep",
]
