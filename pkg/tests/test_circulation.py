import numpy as np
import pytest

from stochflow import stats
from stochflow.circulation import (Loop, MartingaleReport, NumericalFailure, Surface,
                                   constantin_iyer_estimate, energy_bound_check, kelvin_check,
                                   loop_circulation, martingale_rows, pulled_back_surface_integral,
                                   resolution_audit, self_convergence_order, theorem11_experiment,
                                   unit_square, vorticity_transport_check,
                                   vorticity_transport_error)
from stochflow.fieldlib import (TWISTED, axisymmetric_steady, embed_2d_in_3d, get_field,
                                rigid_rotation_3d, taylor_green_2d)
from stochflow.geometry import (VectorField, exterior_derivative, linear_field, probe_points,
                                standard_symplectic)

E1, E2, E3 = np.eye(3)


def test_circle_circulation_of_rotation():
    # u = (-y, x): circulation around the unit circle is 2 pi
    u = linear_field([[0.0, -1.0], [1.0, 0.0]])
    loop = Loop.circle(np.zeros(2), [1.0, 0.0], [0.0, 1.0], 1.0, 64)
    assert abs(loop_circulation(u, loop) - 2 * np.pi) <= 1e-12


def test_gradient_field_has_zero_circulation():
    grad = VectorField(2, lambda x, t: np.stack([np.cos(x[..., 0]) * x[..., 1],
                                                 np.sin(x[..., 0])], -1))
    loop = Loop.circle([0.3, -0.2], [1.0, 0.0], [0.0, 1.0], 0.7, 128)
    assert abs(loop_circulation(grad, loop)) <= 1e-12
    square = Loop.polygon([[0, 0], [1, 0], [1, 1], [0, 1]], per_edge=12)
    assert abs(loop_circulation(grad, square)) <= 1e-12


def test_open_curve_rejected():
    with pytest.raises(ValueError):
        Loop.from_parametrization(lambda s: np.stack([s, 0 * s], -1),
                                  lambda s: np.stack([1 + 0 * s, 0 * s], -1), 16)


def test_loop_dimension_mismatch():
    loop = Loop.circle(np.zeros(2), [1.0, 0.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        loop_circulation(rigid_rotation_3d(), loop)


def test_kelvin_zero_horizon():
    u = rigid_rotation_3d()
    loop = Loop.circle([0.5, 0.2, 0.0], E1, E3, 0.4, 64)
    res = kelvin_check(u, loop, 0.0)
    assert res["drift"] == 0.0 and len(res["values"]) == 1


def test_kelvin_rigid_rotation():
    loop = Loop.circle([1.0, 0.5, 0.0], E1, E3, 0.5, 128)
    assert kelvin_check(rigid_rotation_3d(), loop, 1.0, 1e-3)["drift"] <= 1e-6


def test_kelvin_taylor_green_inviscid_square():
    u = taylor_green_2d(0.0)
    loop = Loop.polygon([[0.2, 0.1], [1.2, 0.1], [1.2, 1.1], [0.2, 1.1]], per_edge=16)
    res = kelvin_check(u, loop, 1.0, 1e-3)
    assert res["drift"] <= 1e-5
    # viscous decay breaks conservation
    assert kelvin_check(taylor_green_2d(0.2), loop, 1.0, 1e-3)["drift"] > 1e-2


def test_vorticity_transport_rigid():
    pts = probe_points(20, 3, seed=4)
    assert vorticity_transport_check(rigid_rotation_3d(), pts, 1.0) <= 1e-6
    assert np.all(vorticity_transport_error(rigid_rotation_3d(), pts, 0.0) == 0)


def test_vorticity_transport_rejects_2d():
    with pytest.raises(ValueError):
        vorticity_transport_check(taylor_green_2d(0.0), np.zeros((1, 2)), 1.0)


def test_vorticity_transport_self_convergence():
    u = axisymmetric_steady(TWISTED)
    pts = probe_points(20, 3, (-2.0, 2.0), seed=2)
    res = self_convergence_order(u, pts, 1.0, [0.1, 0.05, 0.025])
    assert not res["exact"]
    assert min(res["orders"]) >= 2.0
    assert res["errors"][-1] <= 1e-6


def test_self_convergence_exact_for_rigid():
    res = self_convergence_order(rigid_rotation_3d(), probe_points(5, 3), 1.0, [0.1, 0.05])
    assert res["exact"] and res["slope"] is None and res["orders"] == [np.inf]


def test_surface_integral_of_standard_form():
    # the unit square in (q1, p1) has omega-area -1 under the (e1, e2) orientation
    s = unit_square((0.0, 0.0), dim=2, shape=(2, 2))
    ident = np.broadcast_to(np.eye(2), (s.m, 2, 2))
    val = pulled_back_surface_integral(standard_symplectic(2), s, s.nodes, ident)
    assert abs(val + 1.0) <= 1e-14


def test_surface_integral_stokes():
    u = taylor_green_2d(0.0)
    origin = np.array([0.3, 0.2])
    s = unit_square(origin, dim=2, shape=(8, 8))
    ident = np.broadcast_to(np.eye(2), (s.m, 2, 2))
    area = pulled_back_surface_integral(exterior_derivative(u), s, s.nodes, ident)
    corners = origin + np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
    boundary = loop_circulation(u, Loop.polygon(corners, per_edge=16))
    assert abs(area - boundary) <= 1e-10


def test_surface_integral_needs_jacobians():
    s = unit_square()
    with pytest.raises(ValueError):
        pulled_back_surface_integral(standard_symplectic(2), s, s.nodes, None)


def test_surface_rules():
    s = Surface.planar(np.zeros(3), E1, 2 * E2, (5, 3), "gauss")
    assert s.m == 15 and abs(s.weights.sum() - 1) <= 1e-14
    with pytest.raises(ValueError):
        Surface.planar(np.zeros(2), [1, 0], [0, 1], (2, 2), "simpson")


def test_resolution_audit():
    audit = resolution_audit(taylor_green_2d(0.05), unit_square((0.3, 0.2)), 1.0)
    assert audit["passed"]
    coarse = resolution_audit(taylor_green_2d(0.05), unit_square((0.3, 0.2), shape=(1, 1)), 1.0)
    assert not coarse["passed"]


@pytest.fixture(scope="module")
def small_run():
    return theorem11_experiment(taylor_green_2d(0.05), unit_square((0.3, 0.2)), 0.5,
                                [0.25, 0.5], 1000, 1e-2, master_seed=3)


def test_theorem11_smoke(small_run):
    rep = small_run
    assert rep.values.shape == (1000, 3)
    assert rep.n_discarded == 0
    assert rep.max_det_defect <= 1e-5
    assert rep.max_abs_z() <= 4.0
    assert 0.7 <= rep.qv_ratio() <= 1.3
    summary = rep.summary()
    assert summary["energy"]["bound_holds"]
    rows = martingale_rows(rep)
    assert len(rows) == 15 and rows[0][0] == 0.0


def test_theorem11_deterministic_start(small_run):
    # every sample starts from the same surface, so beta~_0 has no spread
    assert np.ptp(small_run.values[:, 0]) == 0.0
    assert np.all(small_run.realized_qv[:, 0] == 0) and np.all(small_run.formula_qv[:, 0] == 0)


def test_theorem11_inviscid_limit():
    # the noise amplitude is sqrt(2 nu) ~ 1.4e-4: samples stay within that of beta~_0
    rep = theorem11_experiment(taylor_green_2d(1e-8), unit_square((0.3, 0.2)), 0.5, [0.5], 200,
                               1e-2, master_seed=0)
    d = rep.values[:, -1] - rep.values[:, 0]
    assert np.max(np.abs(d)) <= 1e-3
    m, se = stats.mean_se(d)
    assert abs(m) <= 3 * se


def test_theorem11_rejects_invalid_field():
    with pytest.raises(NumericalFailure):
        theorem11_experiment(get_field("corrupted-taylor-green", 0.05), unit_square(), 0.5,
                             [0.5], 10, 1e-2, 0)
    with pytest.raises(ValueError):
        theorem11_experiment(taylor_green_2d(0.0), unit_square(), 0.5, [0.5], 10, 1e-2, 0)


def synthetic_report(values, fqv):
    n, c = values.shape
    return MartingaleReport("synthetic", 0.1, 1.0, 0.1, n, 0, np.linspace(0, 1, c), values,
                            fqv.copy(), fqv, 0.0, 0)


def test_energy_check_on_brownian_martingale():
    # z_t = z_0 + W_t has QV t, E z_T^2 = z_0^2 + T
    rng = np.random.default_rng(0)
    n = 20_000
    w = rng.standard_normal(n)
    values = np.stack([np.full(n, 0.5), 0.5 + w], -1)
    fqv = np.stack([np.zeros(n), np.ones(n)], -1)
    e = energy_bound_check(synthetic_report(values, fqv))
    assert e["bound_holds"] and e["identity_holds"]
    # a drifting process violates the identity
    e = energy_bound_check(synthetic_report(values + np.array([0.0, 1.0]), fqv))
    assert not e["identity_holds"]


def test_stats_helpers():
    m, se = stats.mean_se([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(m, [2, 3])
    np.testing.assert_allclose(se, [1, 1])
    assert stats.z_score(0.0, 0.0) == 0 and stats.z_score(1.0, 0.0) == np.inf
    z = stats.pairwise_z(np.array([[0.0, 1.0, 1.0], [0.0, 1.0, 1.0]]))
    assert z[0, 1] == np.inf and z[1, 2] == 0 and z[1, 0] == 0
    assert abs(stats.loglog_slope([1, 2, 4], [1, 4, 16]) - 2) <= 1e-12
    assert np.isnan(stats.mean_se([1.0])[1])


def test_constantin_iyer_small():
    u = embed_2d_in_3d(taylor_green_2d(0.1))
    pts = probe_points(3, 3, seed=1)
    est = constantin_iyer_estimate(u, pts, 0.5, 2000, 1e-2, master_seed=1,
                                   checkpoints=[0.25, 0.5])
    assert est.mean.shape == (2, 3, 3)
    assert est.within(4.0)
    assert est.to_dict()["n_samples"] == 2000


def test_constantin_iyer_inviscid_limit():
    u = embed_2d_in_3d(taylor_green_2d(1e-8))
    pts = probe_points(3, 3, seed=1)
    est = constantin_iyer_estimate(u, pts, 0.5, 10, 1e-2, master_seed=0)
    assert np.max(est.error) <= 1e-3


def test_constantin_iyer_rejects_2d():
    with pytest.raises(ValueError):
        constantin_iyer_estimate(taylor_green_2d(0.1), np.zeros((1, 2)), 0.5, 10, 0.1, 0)
