import json

import numpy as np
import pytest

from stochflow.contact import (ContactFrame, DegenerateFrameError, c_prime, contact_condition_3d,
                               contact_hamiltonian_field, contact_hamiltonian_field_3d,
                               contact_lie_identity, contact_vector_field, pathwise_proportionality,
                               perturbation_sweep, reeb, reeb_3d, reeb_field,
                               strong_contact_check, weak_contact_residual)
from stochflow.fieldlib import (OVERTWISTED, TWISTED, ScalarField, axisymmetric_steady,
                                get_field, rigid_rotation_3d, scaled)
from stochflow.flow import DiffusionSpec
from stochflow.geometry import VectorField, c_operator, constant_field, probe_points

FIELDS = {
    "rigid-rotation-3d": rigid_rotation_3d,
    "twisted-3d": lambda: axisymmetric_steady(TWISTED),
    "overtwisted-3d": lambda: axisymmetric_steady(OVERTWISTED),
}


def hamiltonian():
    def f(x, t=0.0):
        return x[..., 2] + 0.3 * np.sin(x[..., 0]) + 0.2 * x[..., 1] ** 2

    def g(x, t=0.0):
        return np.stack([0.3 * np.cos(x[..., 0]), 0.4 * x[..., 1], np.ones(x.shape[:-1])], -1)

    return ScalarField(3, f, g, name="H")


def unit_hamiltonian():
    return ScalarField(3, lambda x, t=0.0: np.ones(x.shape[:-1]),
                       lambda x, t=0.0: np.zeros(x.shape), name="1")


def probes(n=100, seed=0):
    return probe_points(n, 3, (-2.0, 2.0), seed=seed)


@pytest.mark.parametrize("name", sorted(FIELDS))
def test_frame_identities(name):
    u = FIELDS[name]()
    x = probes()
    assert contact_condition_3d(u, x)["n_degenerate"] == 0
    ident = ContactFrame.at(u, x).identities()
    for key in ("alpha_R", "C_R", "Cprime_R", "R_cross_xi", "Cprime_C_on_uperp"):
        assert ident[key] <= 1e-8, key


def test_rigid_rotation_reeb_is_vertical():
    # u = (-y, x, 1), xi = (0, 0, 2), u . xi = 2, so R = (0, 0, 1)
    x = probes()
    np.testing.assert_allclose(reeb(rigid_rotation_3d(), x), np.broadcast_to([0, 0, 1.0], x.shape),
                               atol=1e-12)
    np.testing.assert_allclose(reeb_3d(rigid_rotation_3d(), x), reeb(rigid_rotation_3d(), x),
                               atol=1e-12)


def test_reeb_scales_inversely():
    u = FIELDS["twisted-3d"]()
    x = probes(20)
    np.testing.assert_allclose(reeb(scaled(u, 2.0), x), 0.5 * reeb(u, x), atol=1e-10)


def test_reeb_requires_odd_dimension():
    with pytest.raises(ValueError):
        reeb(get_field("taylor-green-2d"), np.zeros((1, 2)))


def test_degenerate_frame_raises():
    # planar Taylor-Green embedded in 3-d has u . xi = 0 everywhere
    u = get_field("taylor-green-3d", 0.0)
    x = probes(5)
    assert contact_condition_3d(u, x)["n_degenerate"] == 5
    with pytest.raises(DegenerateFrameError):
        reeb_3d(u, x)
    with pytest.raises(DegenerateFrameError):
        reeb(u, x)


@pytest.mark.parametrize("name", sorted(FIELDS))
def test_c_prime_inverts_on_u_perp(name):
    u = FIELDS[name]()
    x = probes(30)
    c = c_operator(u, x)
    uv = u.value(x, 0.0)
    r = reeb(u, x)
    for kills in ("reeb", "u"):
        cp = c_prime(u, x, kills=kills)
        # C C' = identity on R^perp, and C' maps into u^perp
        rng = np.random.default_rng(1)
        w = rng.standard_normal(x.shape)
        w -= (np.einsum("...i,...i->...", w, r) / np.einsum("...i,...i->...", r, r))[:, None] * r
        np.testing.assert_allclose(np.einsum("...ij,...jk,...k->...i", c, cp, w), w, atol=1e-8)
        assert np.max(np.abs(np.einsum("...i,...ij->...j", uv, cp))) <= 1e-8
    assert np.max(np.abs(np.einsum("...ij,...j->...i", c_prime(u, x, kills="u"), uv))) <= 1e-8


def test_c_prime_rejects_bad_arguments():
    with pytest.raises(ValueError):
        c_prime(rigid_rotation_3d(), probes(2), kills="xi")
    with pytest.raises(ValueError):
        c_prime(get_field("double-rotation-4d"), np.zeros((1, 4)))


@pytest.mark.parametrize("name", sorted(FIELDS))
def test_unit_hamiltonian_gives_reeb(name):
    u = FIELDS[name]()
    x = probes(30)
    np.testing.assert_allclose(contact_hamiltonian_field(u, unit_hamiltonian(), x), reeb(u, x),
                               atol=1e-12)


@pytest.mark.parametrize("name", sorted(FIELDS))
def test_contact_field_identities(name):
    u = FIELDS[name]()
    H = hamiltonian()
    x = probes()
    xh = contact_hamiltonian_field(u, H, x)
    assert np.max(np.abs(np.einsum("...i,...i->...", u.value(x, 0.0), xh) - H(x))) <= 1e-8
    np.testing.assert_allclose(xh, contact_hamiltonian_field_3d(u, H, x), atol=1e-8)
    assert contact_lie_identity(u, H, x) <= 1e-4


def test_reeb_convention_is_not_a_contact_field():
    # extending C' by zero on R breaks the Lie identity
    u = FIELDS["twisted-3d"]()
    H = hamiltonian()
    x = probes(30)

    def value(y, t):
        cp = c_prime(u, y, t, kills="reeb")
        return -np.einsum("...ij,...j->...i", cp, H.grad(y, t)) + H(y, t)[..., None] * reeb(u, y, t)

    from stochflow.geometry import lie_derivative_one_form
    L = lie_derivative_one_form(u, VectorField(3, value)).value(x, 0.0)
    dhr = np.einsum("...i,...i->...", H.grad(x), reeb(u, x))
    assert np.max(np.linalg.norm(L - dhr[:, None] * u.value(x, 0.0), axis=-1)) > 1e-2


def contact_spec(u):
    affine = ScalarField(3, lambda x, t=0.0: 1 + 0.1 * x[..., 0],
                         lambda x, t=0.0: np.broadcast_to([0.1, 0, 0], x.shape).copy())
    return DiffusionSpec(contact_vector_field(u, hamiltonian()),
                         (reeb_field(u), contact_vector_field(u, affine)))


@pytest.mark.parametrize("name", sorted(FIELDS))
def test_strong_and_weak_contact(name):
    u = FIELDS[name]()
    spec = contact_spec(u)
    x = probes(50)
    strong = strong_contact_check(spec, u, x)
    assert strong.passed, strong.max_residual
    weak = weak_contact_residual(spec, u, x)
    assert weak.max_residual[0] <= 1e-4
    back = json.loads(weak.to_json())
    assert back["kind"] == "weak" and back["passed"]


def test_non_contact_noise_fails():
    u = FIELDS["twisted-3d"]()
    spec = DiffusionSpec(contact_vector_field(u, hamiltonian()), (constant_field([1.0, 0, 0]),))
    x = probes(50)
    assert strong_contact_check(spec, u, x).max_residual[1] > 1e-2
    assert weak_contact_residual(spec, u, x).max_residual[0] > 1e-2


def test_perturbation_sweep_monotone():
    u = FIELDS["overtwisted-3d"]()
    spec = contact_spec(u)
    pert = VectorField(3, lambda x, t: np.stack([np.sin(x[..., 1]), 0 * x[..., 0], x[..., 0]], -1))
    res = perturbation_sweep(spec, u, pert, [0.0, 1e-3, 1e-2, 1e-1], probes(30))
    assert res[0] <= 1e-4
    assert all(a < b for a, b in zip(res, res[1:]))


def test_weak_residual_invariant_under_alpha_rescaling():
    u = rigid_rotation_3d()
    spec = contact_spec(u)
    x = probes(30)
    a = weak_contact_residual(spec, u, x).max_residual[0]
    b = weak_contact_residual(spec, scaled(u, 3.0), x).max_residual[0]
    assert a <= 1e-4 and b <= 1e-4


def test_pathwise_proportionality_rigid():
    u = rigid_rotation_3d()
    spec = contact_spec(u)
    defect = pathwise_proportionality(spec, u, probes(3), 0.1, 5e-3, 20, 0)
    assert defect <= 1e-3
