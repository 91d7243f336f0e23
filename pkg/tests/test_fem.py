import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import dblquad

from chnsadapt.fem import (
    ScalarFieldP1,
    VectorFieldP2,
    assemble_mass_p1,
    assemble_stiffness_p1,
    evaluate,
    gradient,
    integrate_p1,
    interpolate_p1,
    interpolate_p2,
    p2_node_coordinates,
    quadrature,
    transfer_p1,
)
from chnsadapt.mesh import MeshError, build_rectangle_mesh, coarsen, find_node_stars, refine, refine_uniform


def _monomial_integral_dblquad(tri, i, j):
    (x0, y0), (x1, y1), (x2, y2) = tri
    # integrate over the reference triangle and scale by the Jacobian
    det = abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))

    def f(t, s):
        x = x0 + s * (x1 - x0) + t * (x2 - x0)
        y = y0 + s * (y1 - y0) + t * (y2 - y0)
        return x**i * y**j

    val, _ = dblquad(f, 0, 1, 0, lambda s: 1 - s, epsabs=1e-14, epsrel=1e-13)
    return val * det


@pytest.mark.parametrize("degree", [1, 2, 4, 5, 6])
def test_quadrature_exact_on_random_triangles(degree, rng):
    rule = quadrature(degree)
    assert rule.weights.sum() == pytest.approx(0.5, rel=1e-15)
    for _ in range(10):
        tri = rng.uniform(-1, 1, size=(3, 2))
        d1, d2 = tri[1] - tri[0], tri[2] - tri[0]
        area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
        if area < 1e-2:
            continue
        pts = rule.points @ tri
        for i in range(degree + 1):
            for j in range(degree + 1 - i):
                approx = 2 * area * np.sum(rule.weights * pts[:, 0] ** i * pts[:, 1] ** j)
                exact = _monomial_integral_dblquad(tri, i, j)
                assert approx == pytest.approx(exact, rel=1e-13, abs=1e-14)


def test_mass_and_stiffness_basics():
    m = build_rectangle_mesh(3, 1, 6, 2)
    M, K = assemble_mass_p1(m), assemble_stiffness_p1(m)
    assert M.sum() == pytest.approx(3.0, abs=1e-12)
    assert np.abs(K @ np.ones(m.n_vertices)).max() <= 1e-12
    assert abs(M - M.T).max() == 0 and abs(K - K.T).max() <= 1e-15
    assert np.linalg.eigvalsh(M.toarray()).min() > 0
    assert np.linalg.eigvalsh(K.toarray()).min() > -1e-12


def test_stiffness_energy_of_x_on_unit_square():
    m = build_rectangle_mesh(1, 1, 1, 1)
    x = m.vertices[:, 0]
    assert x @ (assemble_stiffness_p1(m) @ x) == pytest.approx(1.0, abs=1e-12)


def test_evaluate_and_gradient():
    m = build_rectangle_mesh(2, 1, 4, 2)
    f = interpolate_p1(m, lambda x, y: 2 * x + 3 * y)
    for i in (0, 5, 11):
        assert evaluate(f, m.vertices[i]) == f.values[i]
    np.testing.assert_allclose(gradient(f), np.tile([2.0, 3.0], (m.n_triangles, 1)), atol=1e-13)
    np.testing.assert_allclose(gradient(f, 3), [2.0, 3.0], atol=1e-13)
    with pytest.raises(ValueError):
        evaluate(f, [5.0, 0.5])


def test_p2_reproduces_quadratics_at_midpoints():
    m = build_rectangle_mesh(1, 1, 2, 2)
    v = interpolate_p2(m, lambda x, y: (x**2, x * y))
    e = m.edges
    mids = 0.5 * (m.vertices[e[:, 0]] + m.vertices[e[:, 1]])
    val = evaluate(v, mids)
    np.testing.assert_allclose(val[:, 0], mids[:, 0] ** 2, atol=1e-14)
    # a point inside a triangle is also exact
    pt = np.array([[0.3, 0.2]])
    np.testing.assert_allclose(evaluate(v, pt)[0], [0.09, 0.06], atol=1e-14)


def test_field_shape_validation():
    m = build_rectangle_mesh(1, 1, 1, 1)
    with pytest.raises(ValueError):
        ScalarFieldP1(m, np.zeros(3))
    with pytest.raises(ValueError):
        VectorFieldP2(m, np.zeros((2, 4)))


def test_transfer_identity_and_constants():
    m = build_rectangle_mesh(3, 1, 6, 2)
    f = interpolate_p1(m, lambda x, y: np.sin(x) * y)
    np.testing.assert_array_equal(transfer_p1(f, m).values, f.values)
    r, _ = refine(m, [0, 4, 9])
    c = ScalarFieldP1(m, np.full(m.n_vertices, 0.7))
    np.testing.assert_allclose(transfer_p1(c, r).values, 0.7, rtol=1e-14)
    back, _ = coarsen(r, find_node_stars(r))
    np.testing.assert_allclose(transfer_p1(ScalarFieldP1(r, np.full(r.n_vertices, 0.7)), back).values, 0.7, rtol=1e-12)


def test_transfer_rejects_unrelated_meshes():
    a = build_rectangle_mesh(1, 1, 2, 2)
    b = build_rectangle_mesh(1, 1, 2, 2)
    with pytest.raises(MeshError):
        transfer_p1(ScalarFieldP1(a, np.zeros(a.n_vertices)), b)


def test_refinement_transfer_is_pointwise_exact(rng):
    m = build_rectangle_mesh(3, 1, 6, 2)
    f = ScalarFieldP1(m, rng.standard_normal(m.n_vertices))
    r, _ = refine(m, rng.choice(m.n_triangles, 8, replace=False))
    g = transfer_p1(f, r)
    pts = np.column_stack([rng.uniform(0, 3, 20), rng.uniform(0, 1, 20)])
    np.testing.assert_allclose(evaluate(g, pts), evaluate(f, pts), atol=1e-13)


def _adapted_pair(seed):
    rng = np.random.default_rng(seed)
    m = refine_uniform(build_rectangle_mesh(3, 1, 3, 1), 2)
    m, _ = refine(m, rng.choice(m.n_triangles, 6, replace=False))
    stars = find_node_stars(m)
    c, _ = coarsen(m, stars[: max(1, len(stars) // 2)])
    return m, c


@given(seed=st.integers(0, 1000))
def test_coarsening_transfer_properties(seed):
    fine, coarse = _adapted_pair(seed)
    rng = np.random.default_rng(seed + 1)
    f = ScalarFieldP1(fine, rng.standard_normal(fine.n_vertices))
    g = transfer_p1(f, coarse)
    # mass conservation
    assert integrate_p1(coarse, g.values) == pytest.approx(integrate_p1(fine, f.values), rel=1e-12, abs=1e-13)
    # L2 stability
    Mf, Mc = assemble_mass_p1(fine), assemble_mass_p1(coarse)
    assert g.values @ (Mc @ g.values) <= (f.values @ (Mf @ f.values)) * (1 + 1e-10)
    # projection: once more onto the same target changes nothing
    np.testing.assert_allclose(transfer_p1(g, coarse).values, g.values)


@given(seed=st.integers(0, 1000))
def test_refinement_transfer_stability_and_idempotence(seed):
    rng = np.random.default_rng(seed)
    m = build_rectangle_mesh(3, 1, 6, 2)
    r, _ = refine(m, rng.choice(m.n_triangles, 5, replace=False))
    f = ScalarFieldP1(m, rng.standard_normal(m.n_vertices))
    g = transfer_p1(f, r)
    Mm, Mr = assemble_mass_p1(m), assemble_mass_p1(r)
    assert g.values @ (Mr @ g.values) <= (f.values @ (Mm @ f.values)) * (1 + 1e-10)
    assert integrate_p1(r, g.values) == pytest.approx(integrate_p1(m, f.values), rel=1e-12, abs=1e-13)


def test_p2_node_coordinates_layout():
    m = build_rectangle_mesh(1, 1, 1, 1)
    x = p2_node_coordinates(m)
    assert x.shape == (m.n_vertices + m.n_edges, 2)
    np.testing.assert_array_equal(x[: m.n_vertices], m.vertices)
