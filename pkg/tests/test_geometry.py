import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stochflow.fieldlib import hamiltonian_system, pendulum_hamiltonian, taylor_green_2d
from stochflow.flow import integrate_ode
from stochflow.geometry import (OneFormField, Point, TangentPair, TwoFormField, VectorField,
                                antisym, bilinear, c_operator, constant_field, contraction,
                                exterior_derivative, fd_derivative, generator_two_form,
                                lie_derivative_one_form, lie_derivative_two_form, linear_field,
                                probe_points, pullback_two_form, standard_symplectic,
                                standard_symplectic_matrix)

finite = st.floats(-5, 5, allow_nan=False)
vec3 = arrays(float, 3, elements=finite)


def rotation_field():
    return linear_field([[0, -1, 0], [1, 0, 0], [0, 0, 0]])


def swirl():
    """(-y, x, 1), the rigid swirl."""
    def value(x, t):
        x = np.asarray(x, dtype=float)
        return np.stack([-x[..., 1], x[..., 0], np.ones(x.shape[:-1])], -1)

    def jacobian(x, t):
        j = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 0]])
        return np.broadcast_to(j, np.shape(x)[:-1] + (3, 3)).copy()

    return VectorField(3, value, jacobian, name="swirl")


def gradient_field():
    """grad f for f = sin(x) y + z^2 x."""
    def value(x, t):
        a, b, c = x[..., 0], x[..., 1], x[..., 2]
        return np.stack([np.cos(a) * b + c**2, np.sin(a), 2 * c * a], -1)

    def jacobian(x, t):
        a, b, c = x[..., 0], x[..., 1], x[..., 2]
        z = np.zeros_like(a)
        return np.stack([np.stack([-np.sin(a) * b, np.cos(a), 2 * c], -1),
                         np.stack([np.cos(a), z, z], -1),
                         np.stack([2 * c, z, 2 * a], -1)], -2)

    return VectorField(3, value, jacobian, name="grad f")


def test_point_and_pair_validation():
    assert Point([1.0, 2.0]).n == 2
    with pytest.raises(ValueError):
        Point([np.nan])
    with pytest.raises(ValueError):
        TangentPair(np.zeros(2), np.zeros(2), np.zeros(3))


def test_fd_derivative_matches_analytic():
    u = gradient_field()
    x = probe_points(50, 3)
    np.testing.assert_allclose(fd_derivative(u.value, x), u.jac(x), atol=1e-8)


def test_c_operator_examples():
    x = probe_points(10, 3)
    assert np.all(c_operator(linear_field(np.eye(3)), x) == 0)
    expected = np.array([[0, -2, 0], [2, 0, 0], [0, 0, 0]])
    np.testing.assert_array_equal(c_operator(rotation_field(), x)[0], expected)
    assert np.max(np.abs(c_operator(gradient_field(), x))) <= 1e-12


def test_c_operator_dimension_mismatch():
    with pytest.raises(ValueError):
        c_operator(rotation_field(), np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(vec3, vec3)
def test_c_operator_is_cross_product_with_curl(x, v):
    # for d = 3, C(u) v = xi x v with xi = curl u
    u = gradient_field()
    w = VectorField(3, lambda y, t: np.cross(u.value(y, t), [1.0, 2.0, 3.0]))
    c = c_operator(w, x)
    du = fd_derivative(w.value, x)
    xi = np.array([du[2, 1] - du[1, 2], du[0, 2] - du[2, 0], du[1, 0] - du[0, 1]])
    np.testing.assert_allclose(c @ v, np.cross(xi, v), atol=1e-6 * (1 + np.abs(v).sum() * 10))


def test_standard_symplectic():
    np.testing.assert_array_equal(standard_symplectic_matrix(2), [[0, 1], [-1, 0]])
    J = standard_symplectic_matrix(4)
    np.testing.assert_array_equal(J.T, -J)
    np.testing.assert_array_equal(J @ J, -np.eye(4))
    w = standard_symplectic(4)
    # omega(v1, v2) = J v1 . v2 = sum dp ^ dq, so the canonical pair (e_p1, e_q1) gives +1
    assert w.evaluate(np.zeros(4), np.eye(4)[2], np.eye(4)[0]) == 1.0
    assert w.evaluate(np.zeros(4), np.eye(4)[0], np.eye(4)[2]) == -1.0
    with pytest.raises(ValueError):
        standard_symplectic(3)


def test_exterior_derivative_examples():
    x = probe_points(20, 3)
    assert np.max(np.abs(exterior_derivative(gradient_field()).matrix(x, 0.0))) <= 1e-8
    m = exterior_derivative(swirl()).matrix(x, 0.0)
    np.testing.assert_array_equal(m, np.broadcast_to([[0, -2, 0], [2, 0, 0], [0, 0, 0]], m.shape))
    # u = p . dq on R^4 gives the matrix J
    pdq = VectorField(4, lambda y, t: np.concatenate([y[..., 2:], 0 * y[..., 2:]], -1))
    y = probe_points(10, 4)
    np.testing.assert_allclose(exterior_derivative(pdq).matrix(y, 0.0),
                               np.broadcast_to(standard_symplectic_matrix(4), (10, 4, 4)),
                               atol=1e-9)


def test_contraction_examples():
    n = 4
    omega = standard_symplectic(n)
    v = linear_field(np.arange(16.0).reshape(4, 4))
    y = probe_points(10, n)
    c = contraction(omega, v).value(y, 0.0)
    np.testing.assert_allclose(c, v.value(y, 0.0) @ standard_symplectic_matrix(n).T)
    zero = contraction(omega, constant_field(np.zeros(n))).value(y, 0.0)
    assert np.all(zero == 0)
    assert np.all(bilinear(omega.matrix(y, 0.0), v.value(y, 0.0), v.value(y, 0.0)) == 0)


def test_hamiltonian_field_preserves_omega():
    spec = hamiltonian_system(pendulum_hamiltonian(1))
    y = probe_points(100, 2)
    lie = lie_derivative_two_form(standard_symplectic(2), spec.drift).matrix(y, 0.0)
    assert np.max(np.abs(lie)) <= 1e-6
    const = lie_derivative_two_form(standard_symplectic(2), constant_field([1.0, 2.0]))
    assert np.max(np.abs(const.matrix(y, 0.0))) <= 1e-12


def test_lie_derivative_of_omega_is_d_gamma_for_taylor_green():
    # V = (e_i, w_{q_i}) has i_V omega = (w_{q_i}, -e_i), so L_V omega = d(w_{q_i} . dq)
    # whose q-block is C(dw/dq_i)
    w = taylor_green_2d(0.05)
    omega = standard_symplectic(4)
    y = probe_points(30, 4)
    for i in range(2):
        e = np.eye(2)[i]

        def value(x, t, i=i, e=e):
            return np.concatenate([np.broadcast_to(e, x[..., :2].shape),
                                   w.jac(x[..., :2], t)[..., i]], -1)

        v = VectorField(4, value)
        lie = lie_derivative_two_form(omega, v).matrix(y, 0.3)
        hq = w.hess(y[:, :2], 0.3)[..., i]
        zeta = antisym(hq)
        np.testing.assert_allclose(lie[:, :2, :2], zeta, atol=1e-6)
        assert np.max(np.abs(lie[:, 2:, :])) <= 1e-6


def test_lie_derivative_matches_flow_derivative():
    # (phi_eps^* beta - beta) / eps -> L_V beta, first order in eps
    u = swirl()
    beta = exterior_derivative(gradient_field_plus_swirl())
    v = VectorField(3, lambda x, t: np.stack([np.sin(x[..., 1]), x[..., 0] ** 2, np.cos(x[..., 2])], -1))
    x = probe_points(5, 3, (-1, 1))
    lie = lie_derivative_two_form(beta, v).matrix(x, 0.0)
    errs = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        s = integrate_ode(v, x, 0.0, eps, eps / 20)
        pb = pullback_two_form(beta, s.final, s.final_jacobian)
        errs.append(np.max(np.abs((pb - beta.matrix(x, 0.0)) / eps - lie)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert errs[-1] < 1e-2
    assert np.all(orders > 0.8)
    del u


def gradient_field_plus_swirl():
    g, s = gradient_field(), swirl()
    return VectorField(3, lambda x, t: g.value(x, t) + x[..., 0:1] * s.value(x, t))


def test_lie_derivative_rejects_non_closed():
    beta = TwoFormField(2, lambda x, t: np.zeros(x.shape[:-1] + (2, 2)), closed=False)
    with pytest.raises(NotImplementedError):
        lie_derivative_two_form(beta, constant_field([1.0, 0.0]))


def test_pullback_examples():
    omega = standard_symplectic(2)
    x = np.array([0.3, -0.2])
    np.testing.assert_array_equal(pullback_two_form(omega, x, np.eye(2)), omega.matrix(x, 0.0))
    th = 0.7
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    np.testing.assert_allclose(pullback_two_form(omega, x, rot), standard_symplectic_matrix(2),
                               atol=1e-15)
    shear = np.array([[1.0, 2.0], [0.0, 1.0]])
    np.testing.assert_allclose(pullback_two_form(omega, x, shear), standard_symplectic_matrix(2))


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 3), elements=finite), arrays(float, (3, 3), elements=finite),
       arrays(float, (3, 3), elements=finite))
def test_pullback_is_functorial(a, l1, l2):
    w = antisym(a)
    beta = TwoFormField(3, lambda x, t: np.broadcast_to(w, np.shape(x)[:-1] + (3, 3)))
    x = np.zeros(3)
    inner = pullback_two_form(beta, x, l1)
    twice = np.swapaxes(l2, -1, -2) @ inner @ l2
    np.testing.assert_allclose(twice, pullback_two_form(beta, x, l1 @ l2),
                               rtol=1e-10, atol=1e-9 * (1 + np.abs(twice).max()))


@settings(max_examples=50, deadline=None)
@given(arrays(float, (4, 4), elements=finite), arrays(float, 4, elements=finite),
       arrays(float, 4, elements=finite))
def test_two_form_antisymmetry(a, v, w):
    m = antisym(a)
    assert bilinear(m, v, w) == -bilinear(m, w, v)
    assert np.all(m + m.T == 0)


def test_discrete_stokes_on_small_triangles():
    # circulation of u around a triangle of scale h equals the flux of d alpha up to O(h)
    u = gradient_field_plus_swirl()
    beta = exterior_derivative(u)
    base = np.array([0.2, -0.4, 0.5])
    a, b = np.array([1.0, 0.3, -0.2]), np.array([-0.1, 1.0, 0.4])
    errs = []
    for h in (0.1, 0.05, 0.025):
        p0, p1, p2 = base, base + h * a, base + h * b
        s, wts = np.polynomial.legendre.leggauss(8)
        s, wts = 0.5 * (s + 1), 0.5 * wts
        circ = 0.0
        for p, q in ((p0, p1), (p1, p2), (p2, p0)):
            pts = p + s[:, None] * (q - p)
            circ += np.sum(wts * (u.value(pts, 0.0) @ (q - p)))
        flux = 0.5 * beta.evaluate(base + h * (a + b) / 3, h * a, h * b)
        errs.append(abs(circ - flux) / h**2)
    assert errs[-1] < errs[0]
    assert errs[-1] < 0.1


def test_one_form_jacobian_consistency():
    u = OneFormField.of(gradient_field_plus_swirl())
    x = probe_points(30, 3)
    fd = fd_derivative(u.coeff, x)
    np.testing.assert_allclose(u.jac(x), fd, rtol=1e-4, atol=1e-6)


def test_lie_derivative_one_form_against_coordinates():
    # (L_V alpha)_i = V_j d_j u_i + u_j d_i V_j
    u = gradient_field_plus_swirl()
    v = linear_field([[0.1, 1, 0], [0, 0, 2], [-1, 0, 0.3]])
    x = probe_points(20, 3)
    got = lie_derivative_one_form(u, v).value(x, 0.0)
    du = fd_derivative(u.value, x)
    want = (np.einsum("...ij,...j->...i", du, v.value(x, 0.0))
            + np.einsum("...j,...ji->...i", u.value(x, 0.0), v.jac(x, 0.0)))
    np.testing.assert_allclose(got, want, atol=1e-7)


def test_generator_vanishes_for_hamiltonian_noise():
    from stochflow.flow import DiffusionSpec
    from stochflow.fieldlib import quadratic_hamiltonian
    H = pendulum_hamiltonian(1)
    drift = hamiltonian_system(H).drift
    noise = hamiltonian_system(quadratic_hamiltonian(2)).drift
    spec = DiffusionSpec(drift, (noise,))
    y = probe_points(30, 2)
    assert np.max(np.abs(generator_two_form(spec, standard_symplectic(2)).matrix(y, 0.0))) <= 1e-5


def test_probe_points_deterministic():
    a = probe_points(16, 3, (-1, 1), seed=4)
    b = probe_points(16, 3, (-1, 1), seed=4)
    assert np.array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
