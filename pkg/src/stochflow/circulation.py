"""Circulation along transported loops, pulled-back surface integrals and the
martingale diagnostics for viscous flows.

The stochastic experiments run the reversed flow ``dq = w dt + sqrt(2 nu) dW``
with ``w(q, t) = -u(q, T - t)`` from every node of a surface (or from probe
points), all nodes of one sample sharing that sample's Brownian path.  The
reported process is

    beta~_t = int_Theta (Qbar_t^* dalpha_bar_t),   alpha_bar_t = w(., t) . dq,

which is a real martingale when ``u`` solves Navier-Stokes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import stats
from .fieldlib import VelocityField, max_residual, residual_navier_stokes
from .flow import (CHUNK_SIZE, BLOWUP_BUDGET, BlowUpError, brownian_increments, check_budget,
                   ensemble, integrate_ode, iterate_sde, map_chunks, n_steps_for,
                   reversed_flow_spec, sample_is_bad, snap_checkpoints)
from .geometry import Array, TwoFormField, VectorField, antisym, bilinear

log = logging.getLogger(__name__)

#: maximum Jacobian condition number accepted by the vorticity estimator
MAX_CONDITION = 1e8


class NumericalFailure(RuntimeError):
    """A precondition of a numerical experiment failed (e.g. residual gate)."""


# -- loops and surfaces ---------------------------------------------------------

@dataclass(frozen=True)
class Loop:
    """Closed curve discretised as nodes, tangents and quadrature weights.

    ``sum(weights * f(nodes) . tangents)`` approximates ``oint f . dx``.
    """

    nodes: Array
    tangents: Array
    weights: Array
    closure_gap: float = 0.0

    def __post_init__(self):
        if self.closure_gap > 1e-12:
            raise ValueError(f"loop is not closed (gap {self.closure_gap:.3g})")

    @property
    def dim(self) -> int:
        return self.nodes.shape[-1]

    @property
    def m(self) -> int:
        return self.nodes.shape[0]

    @classmethod
    def from_parametrization(cls, gamma: Callable, dgamma: Callable, m: int = 256) -> "Loop":
        """Periodic trapezoid rule on ``m`` equispaced parameters in ``[0, 1)``."""
        s = np.arange(m) / m
        gap = float(np.max(np.abs(np.asarray(gamma(np.array([1.0]))) -
                                  np.asarray(gamma(np.array([0.0]))))))
        return cls(np.asarray(gamma(s), dtype=float), np.asarray(dgamma(s), dtype=float),
                   np.full(m, 1.0 / m), gap)

    @classmethod
    def circle(cls, center, e1, e2, radius: float = 1.0, m: int = 256) -> "Loop":
        """Circle ``center + r(cos 2 pi s e1 + sin 2 pi s e2)``; counter-clockwise in (e1, e2)."""
        c, a, b = (np.asarray(v, dtype=float) for v in (center, e1, e2))

        def gamma(s):
            th = 2 * np.pi * s[:, None]
            return c + radius * (np.cos(th) * a + np.sin(th) * b)

        def dgamma(s):
            th = 2 * np.pi * s[:, None]
            return 2 * np.pi * radius * (-np.sin(th) * a + np.cos(th) * b)

        # the trig parametrisation closes exactly; avoid reporting roundoff
        return cls(gamma(np.arange(m) / m), dgamma(np.arange(m) / m), np.full(m, 1.0 / m))

    @classmethod
    def polygon(cls, vertices, per_edge: int = 16) -> "Loop":
        """Closed polygon through ``vertices``; Gauss-Legendre nodes on each edge."""
        v = np.asarray(vertices, dtype=float)
        g, gw = np.polynomial.legendre.leggauss(per_edge)
        g, gw = 0.5 * (g + 1), 0.5 * gw
        nodes, tangents, weights = [], [], []
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            nodes.append(a + g[:, None] * (b - a))
            tangents.append(np.broadcast_to(b - a, (per_edge, v.shape[1])))
            weights.append(gw)
        return cls(np.concatenate(nodes), np.concatenate(tangents), np.concatenate(weights))


def _rule(m: int, rule: str) -> tuple:
    if rule == "midpoint":
        return (np.arange(m) + 0.5) / m, np.full(m, 1.0 / m)
    if rule == "gauss":
        g, w = np.polynomial.legendre.leggauss(m)
        return 0.5 * (g + 1), 0.5 * w
    raise ValueError(f"unknown quadrature rule {rule!r}")


@dataclass(frozen=True)
class Surface:
    """Parametrised surface ``tau: [0,1]^2 -> R^n`` on a tensor quadrature grid.

    Nodes are flattened in row-major ``(theta1, theta2)`` order.  The
    orientation is ``(tau_theta1, tau_theta2)``.
    """

    nodes: Array
    d1: Array
    d2: Array
    weights: Array
    shape: tuple = (32, 32)
    rule: str = "midpoint"

    @property
    def dim(self) -> int:
        return self.nodes.shape[-1]

    @property
    def m(self) -> int:
        return self.nodes.shape[0]

    @classmethod
    def from_parametrization(cls, tau: Callable, d1: Callable, d2: Callable,
                             shape=(32, 32), rule: str = "midpoint") -> "Surface":
        s1, w1 = _rule(shape[0], rule)
        s2, w2 = _rule(shape[1], rule)
        th = np.stack(np.meshgrid(s1, s2, indexing="ij"), axis=-1).reshape(-1, 2)
        w = np.outer(w1, w2).ravel()
        nodes, a1, a2 = (np.asarray(f(th), dtype=float) for f in (tau, d1, d2))
        if not (np.all(np.isfinite(a1)) and np.all(np.isfinite(a2))):
            raise ValueError("surface partials must be finite")
        return cls(nodes, a1, a2, w, tuple(shape), rule)

    @classmethod
    def planar(cls, origin, e1, e2, shape=(32, 32), rule: str = "midpoint") -> "Surface":
        """Parallelogram ``origin + theta1 e1 + theta2 e2``."""
        o, a, b = (np.asarray(v, dtype=float) for v in (origin, e1, e2))
        return cls.from_parametrization(
            lambda th: o + th[:, :1] * a + th[:, 1:] * b,
            lambda th: np.broadcast_to(a, (len(th), a.size)),
            lambda th: np.broadcast_to(b, (len(th), b.size)),
            shape, rule)


def unit_square(origin=(0.0, 0.0), dim: int = 2, shape=(4, 4), rule: str = "gauss") -> Surface:
    """Unit square in the first two coordinates starting at ``origin``."""
    o = np.zeros(dim)
    o[:len(origin)] = origin
    e1, e2 = np.eye(dim)[0], np.eye(dim)[1]
    return Surface.planar(o, e1, e2, shape, rule)


# -- deterministic circulation --------------------------------------------------

def loop_circulation(u: VectorField, loop: Loop, t: float = 0.0) -> float:
    """``oint u(gamma, t) . gamma'`` by the loop's quadrature rule."""
    if loop.dim != u.dim:
        raise ValueError("loop and field dimensions differ")
    vals = np.einsum("mi,mi->m", u.value(loop.nodes, t), loop.tangents)
    return float(np.dot(loop.weights, vals))


def transported_line_integral(coeff: Callable, drift: VectorField, loop: Loop, T: float,
                              h: float, store_every: int = 1) -> tuple:
    """``oint_{phi_t(gamma)} coeff . dx`` along the deterministic flow of ``drift``.

    Nodes move with the flow and tangents with its Jacobian.  Returns
    ``(times, values, sample)``.
    """
    sample = integrate_ode(drift, loop.nodes, 0.0, T, h, store_every)
    vals = []
    for t, x, lam in zip(sample.times, sample.states, sample.jacobians):
        tang = np.einsum("mij,mj->mi", lam, loop.tangents)
        vals.append(float(np.dot(loop.weights, np.einsum("mi,mi->m", coeff(x, t), tang))))
    return sample.times, np.array(vals), sample


def kelvin_check(u: VelocityField, loop: Loop, T: float, h: float = 1e-3,
                 store_every: int = 100) -> dict:
    """Circulation of ``u`` around the transported loop; ``drift = max |I(t) - I(0)|``."""
    if loop.dim != u.dim:
        raise ValueError("loop and field dimensions differ")
    if T == 0:
        i0 = loop_circulation(u, loop, 0.0)
        return {"times": [0.0], "values": [i0], "drift": 0.0}
    times, vals, _ = transported_line_integral(u.value, u, loop, T, h, store_every)
    return {"times": times.tolist(), "values": vals.tolist(),
            "drift": float(np.max(np.abs(vals - vals[0])))}


def vorticity_transport_error(u: VelocityField, points, T: float, h: float = 1e-3) -> Array:
    """Per-point ``|xi^T(Q_T x) - DQ_T(x) xi^0(x)|`` for a 3-d flow."""
    if u.dim != 3:
        raise ValueError("vorticity transport needs d = 3")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if T == 0:
        return np.zeros(len(pts))
    s = integrate_ode(u, pts, 0.0, T, h, store_every=10**9)
    lhs = u.vorticity(s.final, T)
    rhs = np.einsum("mij,mj->mi", s.final_jacobian, u.vorticity(pts, 0.0))
    return np.linalg.norm(lhs - rhs, axis=-1)


def vorticity_transport_check(u: VelocityField, points, T: float, h: float = 1e-3) -> float:
    """Max transport error over ``points``."""
    return float(np.max(vorticity_transport_error(u, points, T, h)))


def self_convergence_order(u: VelocityField, points, T: float, hs: Sequence[float],
                           exact_floor: float = 1e-13) -> dict:
    """Observed order of the transport error under step refinement."""
    errs = np.array([vorticity_transport_check(u, points, T, h) for h in hs])
    # an error at round-off level means the integrator is exact for this field
    e = np.maximum(errs, exact_floor)
    orders = np.log2(e[:-1] / e[1:]) if len(hs) > 1 else np.array([])
    orders = np.where((errs[:-1] <= exact_floor) & (errs[1:] <= exact_floor), np.inf, orders)
    exact = bool(np.all(errs <= exact_floor))
    return {"h": list(hs), "errors": errs.tolist(), "orders": orders.tolist(),
            "slope": None if exact else stats.loglog_slope(hs, e), "exact": exact}


# -- pulled-back surface integrals ----------------------------------------------

def pulled_back_surface_integral(beta: TwoFormField, surface: Surface, states: Array,
                                 jacobians: Optional[Array], t: float = 0.0) -> Array:
    """``int_Theta phi^* beta`` per sample.

    ``states`` has shape ``(..., m, n)`` (one row per surface node) and
    ``jacobians`` shape ``(..., m, n, n)``.
    """
    if jacobians is None:
        raise ValueError("pulled-back integrals need flow Jacobians")
    w = beta.matrix(states, t)
    v1 = np.einsum("...ij,...j->...i", jacobians, surface.d1)
    v2 = np.einsum("...ij,...j->...i", jacobians, surface.d2)
    return np.einsum("...m,m->...", bilinear(w, v1, v2), surface.weights)


def _weighted_form(cmat: Array, v1: Array, v2: Array, weights: Array) -> Array:
    return np.einsum("...m,m->...", bilinear(cmat, v1, v2), weights)


# -- surface martingale experiment -----------------------------------------

@dataclass
class MartingaleReport:
    """Monte Carlo summary of the surface martingale ``beta~_t``.

    ``values`` holds per-sample ``beta~`` at ``times`` (``times[0] = 0``);
    ``realized_qv`` / ``formula_qv`` are cumulative to each time.
    """

    field: str
    nu: float
    horizon: float
    h: float
    n_samples: int
    master_seed: int
    times: Array
    values: Array
    realized_qv: Array
    formula_qv: Array
    max_det_defect: float
    n_discarded: int
    audit: dict = field(default_factory=dict)
    residual: dict = field(default_factory=dict)

    @property
    def kept(self) -> Array:
        return np.all(np.isfinite(self.values), axis=1)

    def means(self) -> tuple:
        return stats.mean_se(self.values[self.kept])

    def z_vs_start(self) -> Array:
        v = self.values[self.kept]
        return np.array([stats.paired_z(v[:, 0], v[:, j])[0] for j in range(v.shape[1])])

    def pair_z(self) -> Array:
        return stats.pairwise_z(self.values[self.kept])

    def max_abs_z(self) -> float:
        z = self.pair_z()
        return float(np.max(np.abs(z))) if z.size else 0.0

    def qv_ratio(self) -> float:
        k = self.kept
        return float(np.mean(self.realized_qv[k, -1]) / np.mean(self.formula_qv[k, -1]))

    def summary(self) -> dict:
        mean, se = self.means()
        k = self.kept
        rq, rq_se = stats.mean_se(self.realized_qv[k, -1])
        fq, fq_se = stats.mean_se(self.formula_qv[k, -1])
        return {
            "field": self.field, "nu": self.nu, "T": self.horizon, "h": self.h,
            "n_samples": self.n_samples, "master_seed": self.master_seed,
            "n_discarded": self.n_discarded,
            "times": self.times.tolist(), "mean": mean.tolist(), "se": se.tolist(),
            "z_vs_start": self.z_vs_start().tolist(), "pair_z": self.pair_z().tolist(),
            "max_abs_z": self.max_abs_z(),
            "realized_qv": float(rq), "realized_qv_se": float(rq_se),
            "formula_qv": float(fq), "formula_qv_se": float(fq_se),
            "qv_ratio": self.qv_ratio(), "max_det_defect": self.max_det_defect,
            "audit": self.audit, "residual": self.residual,
            "energy": energy_bound_check(self),
        }


def energy_bound_check(report: MartingaleReport) -> dict:
    """Energy inequality and the identity ``E z_T^2 = z_0^2 + E QV``.

    ``z`` is the terminal value of the surface martingale and ``QV`` the
    formula quadratic variation over ``[0, T]``.
    """
    k = report.kept
    z0 = report.values[k, 0]
    zT = report.values[k, -1]
    qv = report.formula_qv[k, -1]
    lhs, lhs_se = stats.mean_se(qv)
    rhs, rhs_se = stats.mean_se(zT ** 2)
    combined = float(np.hypot(lhs_se, rhs_se))
    gap, gap_se = stats.mean_se(zT ** 2 - z0 ** 2 - qv)
    return {
        "lhs": float(lhs), "lhs_se": float(lhs_se), "rhs": float(rhs), "rhs_se": float(rhs_se),
        "margin": float(rhs - lhs), "bound_holds": bool(lhs <= rhs + 3 * combined),
        "identity_gap": float(gap), "identity_se": float(gap_se),
        "identity_holds": bool(abs(gap) <= 3 * gap_se) if gap_se > 0 else bool(abs(gap) < 1e-12),
    }


def resolution_audit(u: VelocityField, surface: Surface, T: float) -> dict:
    """Relative change of ``beta~_0`` when the surface grid is doubled.

    Only parallelograms can be refined here; the refined grid is rebuilt
    from the surface's first node and spanning vectors.
    """
    w = _reversed_two_form(u, T)
    ident = np.broadcast_to(np.eye(surface.dim), (surface.m, surface.dim, surface.dim))
    coarse = float(pulled_back_surface_integral(w, surface, surface.nodes, ident, 0.0))
    a, b = surface.d1[0], surface.d2[0]
    s1, _ = _rule(surface.shape[0], surface.rule)
    s2, _ = _rule(surface.shape[1], surface.rule)
    origin = surface.nodes[0] - s1[0] * a - s2[0] * b
    fine_s = Surface.planar(origin, a, b, tuple(2 * s for s in surface.shape), surface.rule)
    ident_f = np.broadcast_to(np.eye(surface.dim), (fine_s.m, surface.dim, surface.dim))
    fine = float(pulled_back_surface_integral(w, fine_s, fine_s.nodes, ident_f, 0.0))
    rel = abs(fine - coarse) / max(abs(fine), 1e-300)
    return {"coarse": coarse, "fine": fine, "relative_change": rel, "passed": rel <= 1e-4}


def _reversed_two_form(u: VelocityField, T: float) -> TwoFormField:
    from .fieldlib import reversed_field
    from .geometry import exterior_derivative
    return exterior_derivative(reversed_field(u, T))


def theorem11_experiment(u: VelocityField, surface: Surface, T: float,
                         checkpoints: Sequence[float], n_samples: int, h: float,
                         master_seed: int, workers: Optional[int] = None,
                         validate: bool = True, residual_tol: float = 1e-8,
                         chunk_size: int = CHUNK_SIZE, budget: float = BLOWUP_BUDGET,
                         step_cap: Optional[float] = None) -> MartingaleReport:
    """Monte Carlo test of the surface martingale for a Navier-Stokes field ``u``.

    Every surface node is advected by the reversed flow together with its
    Jacobian; for each sample the integral ``beta~_t`` is recorded at the
    checkpoints, and on every grid step the realised squared increment and
    the predicted quadratic-variation rate
    ``2 nu sum_i (int_Theta Qbar_t^* C(d_i w))^2`` are accumulated.
    """
    if u.nu <= 0:
        raise ValueError("the martingale experiment needs nu > 0")
    if surface.dim != u.dim:
        raise ValueError("surface and field dimensions differ")
    residual = {}
    if validate:
        rng = np.random.default_rng(0)
        probes = rng.uniform(-np.pi, np.pi, (100, u.dim))
        residual = {f"t={t:g}": residual_navier_stokes(u, probes, t) for t in (0.0, 0.5 * T, T)}
        worst = max(max_residual(r) for r in residual.values())
        if not worst <= residual_tol:
            raise NumericalFailure(f"{u.name} fails the Navier-Stokes residual gate "
                                   f"({worst:.3g} > {residual_tol:g})")
    audit = resolution_audit(u, surface, T)
    if not audit["passed"]:
        log.warning("surface resolution audit: relative change %.3g", audit["relative_change"])

    spec = reversed_flow_spec(u, T)
    w = spec.drift
    n_steps = n_steps_for(0.0, T, h)
    idx = np.concatenate([[0], snap_checkpoints(checkpoints, 0.0, h)])
    if np.any(idx > n_steps):
        raise ValueError("checkpoint beyond the horizon")
    n, m = u.dim, surface.m
    two_nu = 2.0 * u.nu

    def forms(x, lam, t):
        dw = w.jac(x, t)
        hw = w.hess(x, t)
        v1 = np.einsum("...ij,...j->...i", lam, surface.d1)
        v2 = np.einsum("...ij,...j->...i", lam, surface.d2)
        beta = _weighted_form(antisym(dw), v1, v2, surface.weights)
        rate = np.zeros(beta.shape)
        for i in range(n):
            y = _weighted_form(antisym(hw[..., i]), v1, v2, surface.weights)
            rate += y * y
        return beta, two_nu * rate

    def run(block):
        b = len(block)
        incs = brownian_increments(master_seed, block, n_steps, spec.k, h)
        incs = incs.reshape(n_steps, b, 1, spec.k)
        x0 = np.broadcast_to(surface.nodes, (b, m, n)).copy()
        vals = np.empty((b, len(idx)))
        rqv = np.zeros((b, len(idx)))
        fqv = np.zeros((b, len(idx)))
        bad = np.zeros(b, dtype=bool)
        r_acc = np.zeros(b)
        f_acc = np.zeros(b)
        prev_beta = None
        prev_x = x0
        lam = None
        for j, t, x, lam in iterate_sde(spec, x0, 0.0, h, n_steps, incs):
            bad |= sample_is_bad(x, prev_x, 1, step_cap)
            prev_x = x
            beta, rate = forms(x, lam, t)
            if prev_beta is not None:
                r_acc = r_acc + (beta - prev_beta) ** 2
            prev_beta = beta
            for c in np.nonzero(idx == j)[0]:
                vals[:, c] = beta
                rqv[:, c] = r_acc
                fqv[:, c] = f_acc
            if j < n_steps:
                f_acc = f_acc + h * rate
        det = np.max(np.abs(np.linalg.det(lam) - 1.0), axis=1)
        bad |= ~np.isfinite(det)
        vals[bad] = np.nan
        return {"values": vals, "rqv": rqv, "fqv": fqv, "bad": bad, "det": det}

    out = map_chunks(run, n_samples, workers, chunk_size)
    check_budget(out["bad"], budget)
    det = out["det"][~out["bad"]]
    return MartingaleReport(
        field=u.name, nu=u.nu, horizon=T, h=h, n_samples=n_samples, master_seed=master_seed,
        times=idx * h, values=out["values"], realized_qv=out["rqv"], formula_qv=out["fqv"],
        max_det_defect=float(det.max()) if det.size else float("nan"),
        n_discarded=int(out["bad"].sum()), audit=audit, residual=residual)


# -- Constantin-Iyer ------------------------------------------------------------

@dataclass
class VorticityEstimate:
    """Monte Carlo estimate of ``xi^T(x)`` at probe points.

    ``mean[c, p]`` and ``se[c, p]`` are per checkpoint ``c`` and probe ``p``;
    every checkpoint estimates the same vector because the underlying
    process is a martingale.
    """

    points: Array
    times: Array
    mean: Array
    se: Array
    exact: Array
    n_samples: int
    n_discarded: int
    master_seed: int

    @property
    def estimate(self) -> Array:
        return self.mean[-1]

    @property
    def error(self) -> Array:
        return np.abs(self.mean - self.exact[None])

    def within(self, k: float = 3.0) -> bool:
        return bool(np.all(self.error <= k * self.se))

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "times": self.times.tolist(),
                "mean": self.mean.tolist(), "se": self.se.tolist(),
                "exact": self.exact.tolist(), "max_abs_error": float(self.error.max()),
                "n_samples": self.n_samples, "n_discarded": self.n_discarded,
                "master_seed": self.master_seed, "within_3se": self.within(3.0)}


def constantin_iyer_estimate(u: VelocityField, points, T: float, n_samples: int, h: float,
                             master_seed: int, checkpoints: Optional[Sequence[float]] = None,
                             workers: Optional[int] = None,
                             chunk_size: int = CHUNK_SIZE) -> VorticityEstimate:
    """Estimate ``xi^T(x) = E[(DQbar_t x)^{-1} xi^{T-t}(Qbar_t x)]`` for ``t`` in the checkpoints.

    At ``t = T`` this is the viscous vorticity formula with the initial
    vorticity ``xi^0``.  Samples whose flow Jacobian has condition number
    above ``MAX_CONDITION`` are discarded and counted.
    """
    if u.dim != 3:
        raise ValueError("the vorticity formula is implemented for d = 3")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cps = [T] if checkpoints is None else list(checkpoints)
    spec = reversed_flow_spec(u, T)
    res = ensemble(spec, pts, n_samples, h, T, cps, master_seed, workers=workers,
                   chunk_size=chunk_size)
    times = res.times
    # xi^{T-t} evaluated at the transported points, pulled back by Lambda^{-1}
    vals = np.empty(res.states.shape)
    for c, t in enumerate(times):
        xi = u.vorticity(res.states[:, c], T - t)
        vals[:, c] = np.linalg.solve(res.jacobians[:, c], xi[..., None])[..., 0]
    cond = np.linalg.cond(res.jacobians.reshape(-1, 3, 3)).reshape(res.jacobians.shape[:-2])
    ill = np.any(cond > MAX_CONDITION, axis=(1, 2)) | res.discarded
    ill |= ~np.all(np.isfinite(vals), axis=(1, 2, 3))
    check_budget(ill)
    mean, se = stats.mean_se(vals[~ill])
    return VorticityEstimate(pts, times, mean, se, u.vorticity(pts, T), n_samples,
                             int(ill.sum()), master_seed)


# -- CSV rows -------------------------------------------------------------------

def martingale_rows(report: MartingaleReport) -> list:
    """Long-format rows ``(t, statistic, value)`` for CSV output."""
    mean, se = report.means()
    z = report.z_vs_start()
    k = report.kept
    rq = report.realized_qv[k].mean(axis=0)
    fq = report.formula_qv[k].mean(axis=0)
    rows = []
    for j, t in enumerate(report.times):
        for name, v in (("mean", mean[j]), ("se", se[j]), ("z_vs_start", z[j]),
                        ("realized_qv", rq[j]), ("formula_qv", fq[j])):
            rows.append((float(t), name, float(v)))
    return rows


__all__ = [
    "Loop", "Surface", "unit_square", "NumericalFailure", "loop_circulation",
    "transported_line_integral", "kelvin_check", "vorticity_transport_check",
    "vorticity_transport_error", "self_convergence_order", "pulled_back_surface_integral",
    "MartingaleReport", "energy_bound_check", "resolution_audit", "theorem11_experiment",
    "VorticityEstimate", "constantin_iyer_estimate", "martingale_rows", "BlowUpError",
]
