"""Experiment runners behind ``stochflow run``.

Each runner takes the validated config (defaults merged in), the output
directory and a flag for figures, and returns an :class:`Outcome`: a JSON
report, long-format CSV rows, named acceptance predicates and figure paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import plotting
from .circulation import (Loop, constantin_iyer_estimate, kelvin_check, martingale_rows,
                          self_convergence_order, theorem11_experiment, unit_square,
                          vorticity_transport_error)
from .contact import (ContactFrame, contact_condition_3d, contact_hamiltonian_field,
                      contact_lie_identity, contact_vector_field, reeb_field,
                      strong_contact_check, weak_contact_residual)
from .fieldlib import (ScalarField, get_field, hamiltonian_system, pendulum_hamiltonian,
                     quadratic_hamiltonian)
from .flow import DiffusionSpec
from .geometry import TangentPair, probe_points
from .symplectic import (classify, corrected_spec, cos_sin_system, equivalence_case,
                         form_martingale_test,
                         liouville_check, potential_hamiltonian, random_polynomial_system,
                         sin_gamma_system, velocity_gradient_system)


class ConfigError(ValueError):
    """The configuration is well-formed JSON but cannot be run."""


@dataclass
class Outcome:
    report: dict
    rows: list = field(default_factory=list)
    predicates: dict = field(default_factory=dict)
    figures: list = field(default_factory=list)
    n_discarded: int = 0


DEFAULT_FIELDS = {
    "hamiltonian-invariant": None,
    "kelvin": {"id": "rigid-rotation-3d", "nu": 0.0},
    "vorticity-transport": {"id": "rigid-rotation-3d", "nu": 0.0},
    "symplectic-classify": {"id": "taylor-green-2d", "nu": 0.1},
    "contact-classify": {"id": "overtwisted-3d", "nu": 0.0},
    "theorem11": {"id": "taylor-green-2d", "nu": 0.05},
    "constantin-iyer": {"id": "taylor-green-3d", "nu": 0.1},
    "liouville": {"id": "double-rotation-4d", "nu": 0.0},
    "drift-correction": {"id": "taylor-green-2d", "nu": 0.1},
}

DEFAULTS = {
    "hamiltonian-invariant": {"dimension": 2, "hamiltonian": "pendulum", "T": 1.0, "h": 1e-3,
                              "loop_nodes": 256, "loop_radius": 1.0, "tolerance": 1e-6},
    "kelvin": {"T": 1.0, "h": 1e-3, "loop_center": [1.0, 0.5, 0.2], "loop_radius": 1.0,
               "loop_nodes": 256, "tolerance": 1e-6},
    "vorticity-transport": {"T": 1.0, "h": 1e-3, "n_points": 20, "probe_box": [-2.0, 2.0],
                            "tolerance": 1e-6, "convergence_steps": [], "min_order": 2.0},
    "symplectic-classify": {"system": "gamma-dw", "dimension": 4, "n_probes": 50,
                            "probe_box": [-3.0, 3.0], "random_systems": 0, "N": 0, "T": 0.5,
                            "h": 5e-3, "checkpoints": [0.1, 0.25, 0.5], "n_pairs": 5,
                            "slope_time": 0.05, "z_threshold": 3.0},
    "contact-classify": {"n_probes": 100, "probe_box": [-3.0, 3.0], "tolerance_frame": 1e-8,
                         "tolerance_lie": 1e-4},
    "theorem11": {"T": 1.0, "h": 2e-3, "N": 20000, "checkpoints": [0.25, 0.5, 0.75, 1.0],
                  "surface_origin": [0.3, 0.2], "surface_shape": [4, 4],
                  "quadrature": "gauss", "validate": True, "expect": "martingale",
                  "z_threshold": 3.0, "violation_threshold": 5.0, "qv_band": [0.85, 1.15]},
    "constantin-iyer": {"T": 0.5, "h": 5e-3, "N": 10000, "n_points": 10,
                        "probe_box": [-3.0, 3.0], "checkpoints": [0.125, 0.25, 0.375, 0.5],
                        "z_threshold": 3.0},
    "liouville": {"dimension": 4, "n_probes": 50, "probe_box": [-2.0, 2.0],
                  "tolerance_h": 1e-6, "tolerance_lie": 1e-4},
    "drift-correction": {"system": "gamma-dw", "dimension": 4, "n_probes": 50,
                         "probe_box": [-3.0, 3.0], "tolerance": 1e-3},
}


def _field(cfg):
    spec = cfg.get("field") or DEFAULT_FIELDS[cfg["experiment"]]
    try:
        return get_field(spec["id"], spec.get("nu", 0.0))
    except KeyError as exc:
        raise ConfigError(str(exc)) from None


def _probes(p, dim, seed):
    return probe_points(p["n_probes"], dim, tuple(p["probe_box"]), seed)


def _fig(out: Path, name: str, enabled: bool, fn: Callable, *args, **kw) -> list:
    if not enabled:
        return []
    return [fn(out / name, *args, **kw).name]


# -- deterministic experiments ------------------------------------------------------

def run_hamiltonian_invariant(cfg, p, out: Path, figures: bool) -> Outcome:
    from .symplectic import poincare_series

    n = p["dimension"]
    d = n // 2
    H = pendulum_hamiltonian(d) if p["hamiltonian"] == "pendulum" else quadratic_hamiltonian(n)
    spec = hamiltonian_system(H)
    center = np.asarray(p.get("loop_center", np.zeros(n)), dtype=float)
    if center.size != n:
        raise ConfigError("loop_center must have the system dimension")
    e1, e2 = np.eye(n)[0], np.eye(n)[d]
    loop = Loop.circle(center, e1, e2, p["loop_radius"], p["loop_nodes"])
    res = poincare_series(spec, loop, p["T"], p["h"], store_every=max(1, int(0.01 / p["h"])))
    dev = res["values"] - res["values"][0]
    report = {"hamiltonian": H.name, "initial": float(res["values"][0]),
              "drift": res["drift"], "symplectic_defect": res["defect"]}
    rows = [("poincare", float(t), "integral", float(v)) for t, v in zip(res["times"], res["values"])]
    preds = {"poincare_drift": res["drift"] <= p["tolerance"],
             "symplectic_defect": res["defect"] <= p["tolerance"]}
    figs = _fig(out, "poincare.png", figures, plotting.line_series, res["times"],
                {"I(t) - I(0)": dev}, ylabel="loop integral change",
                title="Poincare invariant")
    return Outcome(report, rows, preds, figs)


def run_kelvin(cfg, p, out: Path, figures: bool) -> Outcome:
    u = _field(cfg)
    n = u.dim
    if "loop_vertices" in p:
        loop = Loop.polygon(p["loop_vertices"], p.get("loop_nodes_per_edge", 16))
    else:
        center = np.asarray(p["loop_center"], dtype=float)
        if center.size != n:
            raise ConfigError("loop_center must match the field dimension")
        loop = Loop.circle(center, np.eye(n)[0], np.eye(n)[1], p["loop_radius"], p["loop_nodes"])
    res = kelvin_check(u, loop, p["T"], p["h"], store_every=max(1, int(0.01 / p["h"])))
    rows = [("kelvin", float(t), "circulation", float(v))
            for t, v in zip(res["times"], res["values"])]
    preds = {"kelvin_drift": res["drift"] <= p["tolerance"]}
    figs = _fig(out, "kelvin.png", figures, plotting.line_series, res["times"],
                {"I(t) - I(0)": np.asarray(res["values"]) - res["values"][0]},
                ylabel="circulation change", title=f"Kelvin circulation, {u.name}")
    return Outcome({"field": u.name, "initial": res["values"][0], "drift": res["drift"]},
                   rows, preds, figs)


def run_vorticity_transport(cfg, p, out: Path, figures: bool) -> Outcome:
    u = _field(cfg)
    if u.dim != 3:
        raise ConfigError("vorticity transport needs a 3-d field")
    pts = probe_points(p["n_points"], 3, tuple(p["probe_box"]), cfg["master_seed"])
    err = vorticity_transport_error(u, pts, p["T"], p["h"])
    report = {"field": u.name, "max_error": float(err.max())}
    rows = [("transport", i, "error", float(e)) for i, e in enumerate(err)]
    preds = {"transport_error": float(err.max()) <= p["tolerance"]}
    figs = _fig(out, "transport_error.png", figures, plotting.probe_residuals,
                {"|xi(Q x) - DQ xi0|": err}, title=f"vorticity transport, {u.name}")
    if p["convergence_steps"]:
        conv = self_convergence_order(u, pts, p["T"], p["convergence_steps"])
        report["convergence"] = conv
        rows += [("convergence", h, "error", e) for h, e in zip(conv["h"], conv["errors"])]
        preds["convergence_order"] = bool(min(conv["orders"]) >= p["min_order"])
        figs += _fig(out, "transport_convergence.png", figures, plotting.line_series,
                     conv["h"], {"max error": np.maximum(conv["errors"], 1e-18)}, xlabel="h", ylabel="error",
                     logy=True, title="step refinement")
    return Outcome(report, rows, preds, figs)


def _gamma_system(cfg, p):
    n = p["dimension"]
    if p["system"] == "hamiltonian":
        return None, hamiltonian_system(pendulum_hamiltonian(n // 2))
    u = _field(cfg)
    if u.pressure is None or 2 * u.dim != n:
        raise ConfigError(f"{u.name} cannot drive a {n}-dimensional Gamma system")
    H = potential_hamiltonian(u.pressure, u.pressure_gradient, u.dim, name=f"H[{u.name}]")
    nu = max(u.nu, 1e-12)
    if p["system"] == "gamma-dw":
        system = velocity_gradient_system(H, u, nu)
    elif p["system"] == "gamma-sin":
        system = sin_gamma_system(H, nu)
    elif p["system"] == "cos-sin":
        system = cos_sin_system(H)
    else:
        raise ConfigError(f"unknown system {p['system']!r}")
    return system, system.spec()


def run_symplectic_classify(cfg, p, out: Path, figures: bool) -> Outcome:
    seed = cfg["master_seed"]
    system, spec = _gamma_system(cfg, p)
    probes = _probes(p, p["dimension"], seed)
    rep = classify(system if system is not None else spec, probes)
    report = {"classification": rep.to_dict()}
    rows = [("lie_norm", i, "max_abs", v) for i, v in enumerate(rep.lie_norms)]
    rows.append(("generator", 0, "max_abs", rep.generator_norm))
    preds = {}
    if "expected_verdict" in p:
        preds["verdict"] = rep.verdict == p["expected_verdict"]
    figs = []
    if p["random_systems"]:
        rng = np.random.default_rng(seed)
        cases = [equivalence_case(random_polynomial_system(rng, p["dimension"] // 2,
                                                           constant_trace=bool(i % 2)), probes)
                 for i in range(p["random_systems"])]
        report["equivalence"] = cases
        rows += [("equivalence", i, key, float(c[key]))
                 for i, c in enumerate(cases) for key in ("z_norm", "generator_norm")]
        preds["z_generator_equivalence"] = all(c["agree"] for c in cases)
    if p["N"]:
        rng = np.random.default_rng(seed + 1)
        n = p["dimension"]
        pairs = [TangentPair(rng.uniform(-2, 2, n), rng.standard_normal(n),
                             rng.standard_normal(n)) for _ in range(p["n_pairs"])]
        fm = form_martingale_test(spec, pairs, p["T"], p["checkpoints"], p["N"], p["h"], seed,
                                  slope_time=p["slope_time"], workers=cfg.get("workers"))
        report["flow_test"] = fm.to_dict()
        for c, t in enumerate(fm.times):
            for j in range(len(pairs)):
                rows.append(("flow_test", float(t), f"z_pair{j}", float(fm.z[c, j])))
        preds["flow_martingale"] = fm.max_abs_z <= p["z_threshold"]
        labels = [f"t={t:g},pair{j}" for t in fm.times for j in range(len(pairs))]
        figs += _fig(out, "form_z.png", figures, plotting.z_bars, labels, fm.z.ravel(),
                     p["z_threshold"], title="paired z of the pulled-back form")
    figs += _fig(out, "lie_norms.png", figures, plotting.probe_residuals,
                 {"L_Vi omega": rep.lie_norms, "A omega": [rep.generator_norm]},
                 title=f"symplectic criteria: {rep.verdict}")
    return Outcome(report, rows, preds, figs)


def _default_contact_hamiltonian() -> ScalarField:
    def value(x, t):
        return x[..., 2] + 0.3 * np.sin(x[..., 0]) + 0.2 * x[..., 1] ** 2

    def gradient(x, t):
        return np.stack([0.3 * np.cos(x[..., 0]), 0.4 * x[..., 1], np.ones(x.shape[:-1])], -1)

    return ScalarField(3, value, gradient, name="z+0.3sin(x)+0.2y^2")


def _affine_hamiltonian() -> ScalarField:
    return ScalarField(3, lambda x, t: 1.0 + 0.1 * x[..., 0],
                       lambda x, t: np.broadcast_to([0.1, 0.0, 0.0], x.shape).copy(),
                       name="1+0.1x")


def run_contact_classify(cfg, p, out: Path, figures: bool) -> Outcome:
    u = _field(cfg)
    if u.dim != 3:
        raise ConfigError("contact experiments need a 3-d field")
    probes = _probes(p, 3, cfg["master_seed"])
    cond = contact_condition_3d(u, probes)
    if cond["n_degenerate"]:
        from .contact import DegenerateFrameError
        raise DegenerateFrameError(f"{cond['n_degenerate']} degenerate probes")
    frame = ContactFrame.at(u, probes)
    ident = frame.identities()
    H = _default_contact_hamiltonian()
    xh = contact_hamiltonian_field(u, H, probes)
    alpha_x = float(np.max(np.abs(np.einsum("...i,...i->...", u.value(probes, 0.0), xh)
                                  - H(probes, 0.0))))
    lie = contact_lie_identity(u, H, probes)
    spec = DiffusionSpec(contact_vector_field(u, H),
                         (reeb_field(u), contact_vector_field(u, _affine_hamiltonian())),
                         name="contact")
    strong = strong_contact_check(spec, u, probes, tol=p["tolerance_lie"])
    weak = weak_contact_residual(spec, u, probes, tol=p["tolerance_lie"])
    tf = p["tolerance_frame"]
    report = {"field": u.name, "min_abs_u_dot_xi": cond["min_abs"], "frame": ident,
              "alpha_XH_minus_H": alpha_x, "lie_XH_identity": lie,
              "strong": strong.to_dict(), "weak": weak.to_dict()}
    rows = [("frame", 0, k, v) for k, v in ident.items()]
    rows += [("contact", 0, "alpha_XH_minus_H", alpha_x), ("contact", 0, "lie_XH", lie),
             ("contact", 0, "weak_residual", weak.max_residual[0])]
    rows += [("strong", i, "residual", r) for i, r in enumerate(strong.max_residual)]
    preds = {"u_dot_R": ident["alpha_R"] <= tf, "C_R": ident["C_R"] <= tf,
             "Cprime_R": ident["Cprime_R"] <= tf, "alpha_XH": alpha_x <= tf,
             "lie_XH": lie <= p["tolerance_lie"], "strong_contact": strong.passed,
             "weak_contact": weak.passed}
    figs = _fig(out, "contact_residuals.png", figures, plotting.probe_residuals,
                {"u . xi": cond["values"]}, title=f"contact condition, {u.name}")
    return Outcome(report, rows, preds, figs)


def run_liouville(cfg, p, out: Path, figures: bool) -> Outcome:
    u = _field(cfg)
    if u.dim != p["dimension"]:
        raise ConfigError(f"field {u.name} has dimension {u.dim}, config says {p['dimension']}")
    if u.dim % 2:
        raise ConfigError("the Liouville check needs an even dimension")
    probes = _probes(p, u.dim, cfg["master_seed"])
    rep = liouville_check(u, probes)
    report = {"field": u.name, "max_condition": rep.max_condition,
              "transversality": rep.transversality, "lie_defect": rep.lie_defect}
    rows = [("liouville", 0, k, v) for k, v in report.items() if k != "field"]
    preds = {"transversality": rep.transversality <= p["tolerance_h"],
             "lie_identity": rep.lie_defect <= p["tolerance_lie"]}
    figs = _fig(out, "liouville.png", figures, plotting.probe_residuals,
                {"X . grad H - |u|^2": [rep.transversality], "L_X dalpha - dalpha": [rep.lie_defect]},
                title=f"Liouville field, {u.name}")
    return Outcome(report, rows, preds, figs)


def run_drift_correction(cfg, p, out: Path, figures: bool) -> Outcome:
    system, spec = _gamma_system(cfg, p)
    if system is None:
        raise ConfigError("drift correction needs a Gamma system")
    probes = _probes(p, p["dimension"], cfg["master_seed"])
    fixed = corrected_spec(system.hamiltonian, system.noise_fields(), name="corrected")
    rep = classify(fixed, probes)
    diff = float(np.max(np.abs(fixed.drift.value(probes, 0.0) - spec.drift.value(probes, 0.0))))
    bare = DiffusionSpec(system.hamiltonian_field(), system.noise_fields())
    bare_rep = classify(bare, probes)
    report = {"corrected": rep.to_dict(), "uncorrected": bare_rep.to_dict(),
              "drift_vs_ito_conversion": diff}
    rows = [("drift_correction", 0, "generator_corrected", rep.generator_norm),
            ("drift_correction", 0, "generator_uncorrected", bare_rep.generator_norm),
            ("drift_correction", 0, "drift_vs_ito", diff)]
    preds = {"corrected_is_weakly": rep.verdict in ("weakly", "strongly"),
             "generator_small": rep.generator_norm <= p["tolerance"]}
    return Outcome(report, rows, preds, [])


# -- Monte Carlo experiments ----------------------------------------------------------

def run_theorem11(cfg, p, out: Path, figures: bool) -> Outcome:
    u = _field(cfg)
    origin = list(p["surface_origin"]) + [0.0] * (u.dim - len(p["surface_origin"]))
    surf = unit_square(origin[:u.dim], u.dim, tuple(p["surface_shape"]), p["quadrature"])
    rep = theorem11_experiment(u, surf, p["T"], p["checkpoints"], p["N"], p["h"],
                               cfg["master_seed"], workers=cfg.get("workers"),
                               validate=p["validate"])
    summary = rep.summary()
    rows = [("martingale",) + r for r in martingale_rows(rep)]
    zmax = summary["max_abs_z"]
    lo, hi = p["qv_band"]
    energy = summary["energy"]
    if p["expect"] == "martingale":
        preds = {"martingale_z": zmax <= p["z_threshold"],
                 "qv_ratio": lo <= summary["qv_ratio"] <= hi,
                 "energy_bound": energy["bound_holds"],
                 "energy_identity": energy["identity_holds"]}
    else:
        preds = {"violation_detected": zmax > p["violation_threshold"]}
    figs = _fig(out, "martingale.png", figures, plotting.martingale_band, rep.times,
                summary["mean"], summary["se"], title=f"surface martingale, {u.name}")
    k = rep.kept
    figs += _fig(out, "quadratic_variation.png", figures, plotting.line_series, rep.times,
                 {"realized": rep.realized_qv[k].mean(0), "formula": rep.formula_qv[k].mean(0)},
                 ylabel="E QV", title="quadratic variation")
    z = np.asarray(summary["pair_z"])
    iu = np.triu_indices(len(rep.times), 1)
    labels = [f"{rep.times[i]:g}-{rep.times[j]:g}" for i, j in zip(*iu)]
    figs += _fig(out, "pair_z.png", figures, plotting.z_bars, labels, z[iu], p["z_threshold"],
                 title="paired z over checkpoint pairs")
    return Outcome(summary, rows, preds, figs, rep.n_discarded)


def run_constantin_iyer(cfg, p, out: Path, figures: bool) -> Outcome:
    u = _field(cfg)
    if u.dim != 3:
        raise ConfigError("the vorticity formula needs a 3-d field")
    pts = probe_points(p["n_points"], 3, tuple(p["probe_box"]), cfg["master_seed"])
    est = constantin_iyer_estimate(u, pts, p["T"], p["N"], p["h"], cfg["master_seed"],
                                   checkpoints=p["checkpoints"], workers=cfg.get("workers"))
    report = est.to_dict()
    rows = []
    for c, t in enumerate(est.times):
        for i in range(len(pts)):
            for comp in range(3):
                rows.append(("vorticity", float(t), f"p{i}c{comp}_mean", float(est.mean[c, i, comp])))
                rows.append(("vorticity", float(t), f"p{i}c{comp}_se", float(est.se[c, i, comp])))
    if "tolerance" in p:
        preds = {"abs_error": float(est.error.max()) <= p["tolerance"]}
    else:
        preds = {"within_se": est.within(p["z_threshold"])}
    figs = _fig(out, "vorticity_estimate.png", figures, plotting.scatter_compare,
                est.exact[:, 2], est.estimate[:, 2], "exact xi_3", "Monte Carlo xi_3",
                title="vorticity formula")
    return Outcome(report, rows, preds, figs, est.n_discarded)


RUNNERS = {
    "constantin-iyer": run_constantin_iyer,
    "contact-classify": run_contact_classify,
    "drift-correction": run_drift_correction,
    "hamiltonian-invariant": run_hamiltonian_invariant,
    "kelvin": run_kelvin,
    "liouville": run_liouville,
    "symplectic-classify": run_symplectic_classify,
    "theorem11": run_theorem11,
    "vorticity-transport": run_vorticity_transport,
}


def run_experiment(cfg: dict, out: Path, figures: bool = True) -> Outcome:
    kind = cfg["experiment"]
    params = dict(DEFAULTS[kind])
    params.update(cfg.get("params", {}))
    return RUNNERS[kind](cfg, params, out, figures)
