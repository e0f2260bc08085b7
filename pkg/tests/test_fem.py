import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from varinv import fem
from varinv.eit import forward_solve
from varinv.mesh import TriMesh, build_structured_mesh


def single_triangle():
    nodes = [[0, 0], [1, 0], [0, 1]]
    return TriMesh(nodes, [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]])


def test_reference_triangle_gradients():
    eg = fem.p1_gradients(single_triangle())
    np.testing.assert_allclose(eg.grads[0, 0], [-1, -1])
    np.testing.assert_allclose(eg.grads[0, 1], [1, 0])
    np.testing.assert_allclose(eg.grads[0, 2], [0, 1])


def test_gradients_sum_to_zero_and_reproduce_affine(mesh8):
    eg = fem.p1_gradients(mesh8)
    np.testing.assert_allclose(eg.grads.sum(axis=1), 0, atol=1e-12)
    x, y = mesh8.nodes.T
    np.testing.assert_allclose(eg.of(x), np.tile([1.0, 0.0], (mesh8.n_triangles, 1)), atol=1e-12)
    np.testing.assert_allclose(eg.of(3 * x - 2 * y + 1), np.tile([3.0, -2.0], (mesh8.n_triangles, 1)),
                               atol=1e-12)


def test_rot():
    np.testing.assert_array_equal(fem.rot(np.array([1.0, 2.0])), [-2.0, 1.0])


def test_scatter_is_adjoint(mesh4):
    rng = np.random.default_rng(0)
    eg = fem.p1_gradients(mesh4)
    u = rng.standard_normal(mesh4.n_nodes)
    w = rng.standard_normal((mesh4.n_triangles, 2))
    assert np.sum(eg.of(u) * w) == pytest.approx(u @ eg.scatter(w, mesh4.n_nodes))
    assert np.sum(eg.rot_of(u) * w) == pytest.approx(u @ eg.rot_scatter(w, mesh4.n_nodes))


def test_stiffness_basic(mesh1):
    K = fem.weighted_stiffness(mesh1, 1.0)
    np.testing.assert_allclose(K @ np.ones(4), 0, atol=1e-14)
    Kd = K.toarray()
    np.testing.assert_allclose(Kd, Kd.T)
    assert np.linalg.eigvalsh(Kd).min() > -1e-12


def test_stiffness_linear_in_sigma(mesh4):
    rng = np.random.default_rng(1)
    s = rng.uniform(0.5, 2, mesh4.n_triangles)
    np.testing.assert_allclose(fem.weighted_stiffness(mesh4, 2 * s).toarray(),
                               2 * fem.weighted_stiffness(mesh4, s).toarray(), rtol=1e-14)


def test_stiffness_rejects_nonpositive(mesh4):
    s = np.ones(mesh4.n_triangles)
    s[3] = 0.0
    with pytest.raises(ValueError):
        fem.weighted_stiffness(mesh4, s)


def test_dirichlet_affine_exact(mesh8):
    x = mesh8.nodes[:, 0]
    u = forward_solve(mesh8, np.ones(mesh8.n_triangles), dirichlet=x[mesh8.boundary_nodes])
    np.testing.assert_allclose(u, x, atol=1e-13)


def test_stiffness_sigma_derivative(mesh4):
    rng = np.random.default_rng(2)
    s = rng.uniform(0.5, 2, mesh4.n_triangles)
    u = rng.standard_normal(mesh4.n_nodes)
    eg = fem.p1_gradients(mesh4)
    exact = mesh4.areas * np.sum(eg.of(u) ** 2, axis=1)
    h = 1e-6
    for t in (0, 7, 20):
        e = np.zeros_like(s)
        e[t] = h
        fd = (u @ fem.weighted_stiffness(mesh4, s + e) @ u - u @ fem.weighted_stiffness(mesh4, s - e) @ u) / (2 * h)
        assert fd == pytest.approx(exact[t], rel=1e-6)


def test_mass_matrix(mesh4):
    M = fem.mass_matrix(mesh4)
    one = np.ones(mesh4.n_nodes)
    assert one @ M @ one == pytest.approx(1.0)
    x = mesh4.nodes[:, 0]
    assert one @ M @ x == pytest.approx(0.5)
    assert x @ M @ x == pytest.approx(1 / 3)


def test_fractional_norm_constant(mesh4):
    for s in (0.0, 0.5, 0.9, 1.25):
        op = fem.fractional_operator(mesh4, s)
        assert fem.fractional_norm(op, np.ones(mesh4.n_nodes)) == pytest.approx(1.0, abs=1e-10)


def test_fractional_norm_s0_and_s1(mesh4):
    rng = np.random.default_rng(3)
    u = rng.standard_normal(mesh4.n_nodes)
    M = fem.mass_matrix(mesh4).toarray()
    K = fem.weighted_stiffness(mesh4, 1.0).toarray()
    assert fem.fractional_norm(fem.fractional_operator(mesh4, 0.0), u) == pytest.approx(u @ M @ u, rel=1e-10)
    assert fem.fractional_norm(fem.fractional_operator(mesh4, 1.0), u) == pytest.approx(u @ (M + K) @ u, rel=1e-10)


def test_fractional_eigenpairs(mesh4):
    op = fem.fractional_operator(mesh4, 1.25)
    M = fem.mass_matrix(mesh4).toarray()
    V = op.eigenvectors
    np.testing.assert_allclose(V.T @ M @ V, np.eye(mesh4.n_nodes), atol=1e-9)
    assert op.eigenvalues.min() >= 0


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 1.5), st.floats(0, 1.5), st.integers(0, 2**31))
def test_fractional_norm_monotone_in_s(s1, s2, seed):
    m = build_structured_mesh(3)
    lo, hi = sorted((s1, s2))
    u = np.random.default_rng(seed).standard_normal(m.n_nodes)
    a = fem.fractional_norm(fem.fractional_operator(m, lo), u)
    b = fem.fractional_norm(fem.fractional_operator(m, hi), u)
    assert a <= b * (1 + 1e-12) + 1e-14


def test_fractional_gradient_fd(mesh4):
    op = fem.fractional_operator(mesh4, 1.25)
    rng = np.random.default_rng(4)
    u, d = rng.standard_normal((2, mesh4.n_nodes))
    h = 1e-6
    fd = (fem.fractional_norm(op, u + h * d) - fem.fractional_norm(op, u - h * d)) / (2 * h)
    assert fd == pytest.approx(op.gradient(u) @ d, rel=1e-6)


def test_fractional_dimension_mismatch(mesh4):
    with pytest.raises(ValueError):
        fem.fractional_norm(fem.fractional_operator(mesh4, 1.0), np.ones(3))


def test_boundary_integral_examples(mesh8):
    b = mesh8.boundary_nodes
    x, y = mesh8.nodes[b].T
    assert fem.boundary_integral(mesh8, np.ones(len(b))) == pytest.approx(4.0)
    assert fem.boundary_integral(mesh8, x) == pytest.approx(2.0)
    # odd under the rotation by pi about (1/2, 1/2)
    assert fem.boundary_integral(mesh8, (x - 0.5) ** 3 + (y - 0.5)) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        fem.boundary_integral(mesh8, np.ones(3))


def test_discrete_green_identity(mesh8):
    """sum |T| grad(phi).rot grad(psi) = + sum_edges int phi (rot grad psi . nu)
    for the counter-clockwise loop, with rot grad psi . nu = -d(psi)/ds."""
    rng = np.random.default_rng(5)
    eg = fem.p1_gradients(mesh8)
    a, c = mesh8.boundary_edges.T
    for _ in range(20):
        phi, psi = rng.standard_normal((2, mesh8.n_nodes))
        vol = float(mesh8.areas @ np.sum(eg.of(phi) * eg.rot_of(psi), axis=1))
        flux = -(psi[c] - psi[a])  # edge integral of rot grad psi . nu
        bnd = float(np.sum(0.5 * (phi[a] + phi[c]) * flux))
        assert vol == pytest.approx(bnd, rel=1e-12, abs=1e-12)
        assert phi @ fem.cross_matrix(mesh8) @ psi == pytest.approx(vol, rel=1e-12, abs=1e-12)


def test_p0_to_p1_preserves_constants(mesh4):
    P = fem.p0_to_p1(mesh4)
    np.testing.assert_allclose(P @ np.full(mesh4.n_triangles, 2.5), 2.5)
