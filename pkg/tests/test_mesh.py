import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chnsadapt.mesh import Mesh, MeshError, build_rectangle_mesh, coarsen, find_node_stars, refine, refine_uniform


def _edge_multiplicity(mesh):
    t = mesh.triangles
    keys = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, counts = np.unique(keys, axis=0, return_counts=True)
    return counts


def _assert_valid(mesh, area):
    assert np.all(mesh.signed_area > 0)
    assert abs(mesh.signed_area.sum() - area) <= 1e-12 * area
    assert set(np.unique(_edge_multiplicity(mesh))) <= {1, 2}
    mesh.check()


def test_single_square():
    m = build_rectangle_mesh(1, 1, 1, 1)
    assert (m.n_triangles, m.n_vertices, m.n_edges) == (2, 4, 5)


def test_two_by_two_grid():
    m = build_rectangle_mesh(1, 1, 2, 2)
    assert (m.n_triangles, m.n_vertices) == (8, 9)


def test_domain_area():
    m = build_rectangle_mesh(3, 1, 48, 16)
    assert abs(m.signed_area.sum() - 3.0) <= 1e-12


@pytest.mark.parametrize("args", [(0, 1, 1, 1), (1, -1, 1, 1), (1, 1, 0, 1), (1, 1, 1, 0), (1, 1, 1.5, 1)])
def test_rejects_bad_dimensions(args):
    with pytest.raises(MeshError):
        build_rectangle_mesh(*args)


def test_refine_nothing_is_identity():
    m = build_rectangle_mesh(1, 1, 2, 2)
    r, _ = refine(m, [])
    assert r.n_triangles == m.n_triangles
    np.testing.assert_array_equal(r.triangles, m.triangles)


def test_refine_one_triangle_of_square():
    m = build_rectangle_mesh(1, 1, 1, 1)
    r, tmap = refine(m, [0])
    assert 4 <= r.n_triangles <= 6
    _assert_valid(r, 1.0)
    assert tmap.kind == "refine"


def test_refine_rejects_out_of_range():
    with pytest.raises(MeshError):
        refine(build_rectangle_mesh(1, 1, 1, 1), [2])


def test_children_have_half_area():
    m = build_rectangle_mesh(2, 1, 4, 2)
    r, tmap = refine(m, [3, 7])
    parents = tmap.containing
    # every parent that was bisected exactly once has children of half its area
    for p in np.unique(parents):
        kids = np.flatnonzero(parents == p)
        if kids.size == 2:
            np.testing.assert_allclose(r.signed_area[kids], m.signed_area[p] / 2, rtol=1e-14)
        elif kids.size == 1:
            assert r.signed_area[kids[0]] == pytest.approx(m.signed_area[p], rel=1e-14)
        else:
            assert kids.size == 4
            np.testing.assert_allclose(r.signed_area[kids], m.signed_area[p] / 4, rtol=1e-13)


def test_no_stars_on_initial_mesh():
    assert find_node_stars(build_rectangle_mesh(3, 1, 6, 2)) == []


def test_uniform_refine_gives_one_star_per_new_vertex():
    m = build_rectangle_mesh(1, 1, 1, 1)
    r = refine_uniform(m, 1)
    stars = find_node_stars(r)
    # the square's diagonal midpoint is the only new vertex and it is interior
    assert r.n_vertices == 5
    assert [(s.center, len(s.triangles), s.boundary) for s in stars] == [(4, 4, False)]


def test_uniform_refine_twice_stars_cover_new_vertices():
    m = refine_uniform(build_rectangle_mesh(1, 1, 1, 1), 1)
    r, _ = refine(m, np.arange(m.n_triangles))
    stars = find_node_stars(r)
    assert {s.center for s in stars} == set(range(m.n_vertices, r.n_vertices))
    for s in stars:
        assert len(s.triangles) == (2 if s.boundary else 4)


def test_refine_then_coarsen_round_trip():
    m = build_rectangle_mesh(1, 1, 2, 2)
    r, _ = refine(m, [0])
    stars = find_node_stars(r)
    back = r
    while stars:
        back, _ = coarsen(back, stars)
        stars = find_node_stars(back)
    assert back.n_triangles == m.n_triangles
    np.testing.assert_array_equal(np.sort(back.vertices, axis=0), np.sort(m.vertices, axis=0))
    key = lambda mesh: sorted(tuple(sorted(map(tuple, mesh.vertices[t].tolist()))) for t in mesh.triangles)  # noqa: E731
    assert key(back) == key(m)


def test_coarsen_nothing_and_area():
    r = refine_uniform(build_rectangle_mesh(3, 1, 3, 1), 2)
    same, _ = coarsen(r, [])
    assert same.n_triangles == r.n_triangles
    c, _ = coarsen(r, find_node_stars(r))
    _assert_valid(c, 3.0)


def test_coarsen_rejects_overlap_and_stale():
    r = refine_uniform(build_rectangle_mesh(1, 1, 1, 1), 1)
    stars = find_node_stars(r)
    with pytest.raises(MeshError):
        coarsen(r, [stars[0], stars[0]])
    c, _ = coarsen(r, stars)
    with pytest.raises(MeshError):
        coarsen(c, stars)


def test_geometry_right_triangle():
    m = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]), extent=(1.0, 1.0))
    g = m.geometry()
    assert g.h_T[0] == pytest.approx(np.sqrt(2))
    assert g.area[0] == pytest.approx(0.5)


def test_normal_orientation_convention():
    m = build_rectangle_mesh(1, 1, 1, 2)
    g = m.geometry()
    inner = np.flatnonzero(m.edge_tris[:, 1] >= 0)
    horiz = [e for e in inner if abs(g.normal[e, 1]) == pytest.approx(1.0)]
    assert horiz, "expected a horizontal interior edge"
    e = horiz[0]
    assert g.h_E[e] == pytest.approx(1.0)
    lo, hi = m.edge_tris[e]
    cen = m.vertices[m.triangles].mean(axis=1)
    assert np.dot(g.normal[e], cen[hi] - cen[lo]) > 0
    # renumbering the two triangles flips the normal
    perm = np.arange(m.n_triangles)
    perm[[lo, hi]] = perm[[hi, lo]]
    m2 = Mesh(m.vertices, m.triangles[perm], extent=m.extent)
    e2 = [k for k in range(m2.n_edges) if set(m2.edges[k]) == set(m.edges[e])][0]
    np.testing.assert_allclose(m2.geometry().normal[e2], -g.normal[e])


def test_boundary_normals_point_outward():
    m = build_rectangle_mesh(2, 1, 3, 2)
    g = m.geometry()
    expected = {0: (0, -1), 1: (1, 0), 2: (0, 1), 3: (-1, 0)}
    for e in np.flatnonzero(m.boundary_tag >= 0):
        np.testing.assert_allclose(g.normal[e], expected[int(m.boundary_tag[e])], atol=1e-15)


@given(seed=st.integers(0, 10_000), rounds=st.integers(1, 5))
def test_random_adaptation_invariants(seed, rounds):
    rng = np.random.default_rng(seed)
    m = build_rectangle_mesh(3, 1, 3, 1)
    angle0, ratio0 = m.min_angle(), m.shape_ratio()
    for _ in range(rounds):
        marked = rng.choice(m.n_triangles, size=max(1, m.n_triangles // 3), replace=False)
        m, _ = refine(m, marked)
        _assert_valid(m, 3.0)
        stars = find_node_stars(m)
        if stars and rng.random() < 0.5:
            pick = [s for s in stars if rng.random() < 0.5]
            m, _ = coarsen(m, pick)
            _assert_valid(m, 3.0)
        tris = [set(s.triangles) for s in find_node_stars(m)]
        assert sum(len(t) for t in tris) == len(set().union(*tris)) if tris else True
        assert m.min_angle() >= 0.5 * angle0 - 1e-12
        assert m.shape_ratio() <= 4 * ratio0
