"""P1 / P2 Lagrange spaces, quadrature and transfer between nested meshes.

P2 degrees of freedom are ordered vertices first, then one node per edge in
global edge order.  Local P2 node ``3 + i`` sits on the edge opposite local
vertex ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, MeshError


# -- quadrature ---------------------------------------------------------------
@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights on the reference triangle (area 1/2)."""

    points: np.ndarray  # (Q, 3)
    weights: np.ndarray  # (Q,)
    degree: int


def _orbit3(a, w):
    return [(a, a, 1 - 2 * a), (a, 1 - 2 * a, a), (1 - 2 * a, a, a)], [w] * 3


def _orbit6(a, b, w):
    c = 1 - a - b
    pts = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    return pts, [w] * 6


@lru_cache(maxsize=None)
def quadrature(degree: int) -> QuadratureRule:
    """Symmetric Dunavant rule exact up to ``degree`` (1, 2, 4, 5 or 6)."""
    pts, wts = [], []

    def add(orbit):
        pts.extend(orbit[0])
        wts.extend(orbit[1])

    if degree <= 1:
        pts, wts, deg = [(1 / 3, 1 / 3, 1 / 3)], [1.0], 1
    elif degree == 2:
        add(_orbit3(1 / 6, 1 / 3))
        deg = 2
    elif degree <= 4:
        add(_orbit3(0.445948490915965, 0.223381589678011))
        add(_orbit3(0.091576213509771, 0.109951743655322))
        deg = 4
    elif degree == 5:
        pts, wts = [(1 / 3, 1 / 3, 1 / 3)], [0.225]
        add(_orbit3(0.470142064105115, 0.132394152788506))
        add(_orbit3(0.101286507323456, 0.125939180544827))
        deg = 5
    elif degree == 6:
        add(_orbit3(0.249286745170910, 0.116786275726379))
        add(_orbit3(0.063089014491502, 0.050844906370207))
        add(_orbit6(0.053145049844817, 0.310352451033784, 0.082851075618374))
        deg = 6
    else:
        raise ValueError(f"no quadrature rule of degree {degree}")
    w = np.array(wts, dtype=float)
    w *= 0.5 / w.sum()
    p = np.array(pts, dtype=float)
    p /= p.sum(axis=1, keepdims=True)
    p.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(p, w, deg)


# -- reference bases ------------------------------------------------------------
_EDGE_PAIRS = ((1, 2), (2, 0), (0, 1))


def p1_values(lam):
    """P1 basis at barycentric points ``lam`` (Q, 3) -> (Q, 3)."""
    return np.asarray(lam, dtype=float)


def p2_values(lam):
    """P2 basis at barycentric points ``lam`` (Q, 3) -> (Q, 6)."""
    lam = np.asarray(lam, dtype=float)
    out = np.empty((len(lam), 6))
    out[:, :3] = lam * (2 * lam - 1)
    for i, (j, k) in enumerate(_EDGE_PAIRS):
        out[:, 3 + i] = 4 * lam[:, j] * lam[:, k]
    return out


def p2_gradients(lam, dlam):
    """Physical P2 gradients.

    ``lam`` (Q, 3) barycentric points, ``dlam`` (E, 3, 2) gradients of the
    barycentric coordinates; returns (E, Q, 6, 2).
    """
    lam = np.asarray(lam, dtype=float)
    E, Q = len(dlam), len(lam)
    G = np.empty((E, Q, 6, 2))
    for i in range(3):
        G[:, :, i, :] = (4 * lam[None, :, i, None] - 1) * dlam[:, None, i, :]
    for i, (j, k) in enumerate(_EDGE_PAIRS):
        G[:, :, 3 + i, :] = 4 * (lam[None, :, k, None] * dlam[:, None, j, :] + lam[None, :, j, None] * dlam[:, None, k, :])
    return G


def p2_hessians(dlam):
    """Constant second derivatives of the P2 basis: (E, 6, 2, 2)."""
    E = len(dlam)
    H = np.empty((E, 6, 2, 2))
    for i in range(3):
        H[:, i] = 4 * np.einsum("ea,eb->eab", dlam[:, i], dlam[:, i])
    for i, (j, k) in enumerate(_EDGE_PAIRS):
        H[:, 3 + i] = 4 * (np.einsum("ea,eb->eab", dlam[:, j], dlam[:, k]) + np.einsum("ea,eb->eab", dlam[:, k], dlam[:, j]))
    return H


def barycentric_gradients(mesh: Mesh) -> np.ndarray:
    """(NT, 3, 2) constant gradients of the barycentric coordinates."""
    return _bary_cache(mesh)


def _bary_cache(mesh):
    cached = mesh.__dict__.get("_dlam")
    if cached is None:
        p = mesh.vertices[mesh.triangles]
        area2 = 2.0 * mesh.signed_area
        dl = np.empty((mesh.n_triangles, 3, 2))
        for i in range(3):
            a = p[:, (i + 1) % 3]
            b = p[:, (i + 2) % 3]
            # gradient of lambda_i is the inward normal of the opposite edge / (2|T|)
            dl[:, i, 0] = (a[:, 1] - b[:, 1]) / area2
            dl[:, i, 1] = (b[:, 0] - a[:, 0]) / area2
        dl.setflags(write=False)
        mesh.__dict__["_dlam"] = cached = dl
    return cached


def physical_points(mesh: Mesh, lam) -> np.ndarray:
    """Map barycentric points (Q, 3) to (NT, Q, 2) physical coordinates."""
    p = mesh.vertices[mesh.triangles]
    return np.einsum("qi,eik->eqk", np.asarray(lam, dtype=float), p)


def p2_dofs(mesh: Mesh) -> np.ndarray:
    """(NT, 6) global scalar P2 indices."""
    cached = mesh.__dict__.get("_p2dofs")
    if cached is None:
        cached = np.concatenate([mesh.triangles, mesh.n_vertices + mesh.tri_edges], axis=1)
        cached.setflags(write=False)
        mesh.__dict__["_p2dofs"] = cached
    return cached


def n_p2(mesh: Mesh) -> int:
    return mesh.n_vertices + mesh.n_edges


def p2_node_coordinates(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices
    e = mesh.edges
    return np.concatenate([v, 0.5 * (v[e[:, 0]] + v[e[:, 1]])])


# -- fields -------------------------------------------------------------------
@dataclass(frozen=True)
class ScalarFieldP1:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.values) != (self.mesh.n_vertices,):
            raise ValueError("P1 field needs one coefficient per vertex")


@dataclass(frozen=True)
class VectorFieldP2:
    """Velocity-like field; ``values`` has shape (2, NV + NE)."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if np.shape(self.values) != (2, n_p2(self.mesh)):
            raise ValueError("P2 vector field needs shape (2, NV + NE)")

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def interpolate_p1(mesh: Mesh, func) -> ScalarFieldP1:
    v = mesh.vertices
    return ScalarFieldP1(mesh, np.asarray(func(v[:, 0], v[:, 1]), dtype=float) * np.ones(mesh.n_vertices))


def interpolate_p2(mesh: Mesh, func) -> VectorFieldP2:
    """Nodal interpolation of ``func(x, y) -> (fx, fy)``."""
    x = p2_node_coordinates(mesh)
    fx, fy = func(x[:, 0], x[:, 1])
    ones = np.ones(len(x))
    return VectorFieldP2(mesh, np.stack([fx * ones, fy * ones]).astype(float))


def locate(mesh: Mesh, points, tol: float = 1e-12):
    """Containing triangle and barycentric coordinates of each point (brute force)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    p = mesh.vertices[mesh.triangles]
    dl = barycentric_gradients(mesh)
    tri = np.full(len(points), -1)
    lam = np.zeros((len(points), 3))
    for n, x in enumerate(points):
        d = x[None, :] - p[:, 0]
        l12 = np.einsum("eik,ek->ei", dl[:, 1:], d)
        l0 = 1.0 - l12.sum(axis=1)
        ll = np.column_stack([l0, l12])
        inside = np.flatnonzero(ll.min(axis=1) >= -tol)
        if inside.size == 0:
            raise ValueError(f"point {tuple(x)} lies outside the mesh")
        tri[n] = inside[0]
        lam[n] = ll[inside[0]]
    return tri, lam


def evaluate(field, point):
    """Value of a P1 scalar or P2 vector field at ``point`` (or an (n, 2) array)."""
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    tri, lam = locate(field.mesh, pts)
    if isinstance(field, ScalarFieldP1):
        out = np.einsum("ni,ni->n", lam, field.values[field.mesh.triangles[tri]])
    elif isinstance(field, VectorFieldP2):
        N = np.array([p2_values(l[None])[0] for l in lam])
        dofs = p2_dofs(field.mesh)[tri]
        out = np.stack([np.einsum("na,na->n", N, field.values[c][dofs]) for c in range(2)], axis=1)
    else:
        raise TypeError("unsupported field type")
    return out[0] if np.ndim(point) == 1 else out


def gradient(field: ScalarFieldP1, triangle=None) -> np.ndarray:
    """Per-triangle gradient of a P1 field: (NT, 2) or (2,) for one triangle."""
    dl = barycentric_gradients(field.mesh)
    g = np.einsum("eik,ei->ek", dl, field.values[field.mesh.triangles])
    return g if triangle is None else g[triangle]


def p1_gradient(mesh: Mesh, values) -> np.ndarray:
    return np.einsum("eik,ei->ek", barycentric_gradients(mesh), np.asarray(values)[mesh.triangles])


# -- P1 matrices --------------------------------------------------------------
_P1_LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


def _scatter(mesh, local, rows, cols, shape):
    I = np.broadcast_to(rows[:, :, None], local.shape)
    J = np.broadcast_to(cols[:, None, :], local.shape)
    return sp.coo_matrix((local.ravel(), (I.ravel(), J.ravel())), shape=shape).tocsr()


def assemble_mass_p1(mesh: Mesh) -> sp.csr_matrix:
    cached = mesh.__dict__.get("_m1")
    if cached is None:
        local = mesh.signed_area[:, None, None] * _P1_LOCAL_MASS[None]
        t = mesh.triangles
        cached = _scatter(mesh, local, t, t, (mesh.n_vertices,) * 2)
        mesh.__dict__["_m1"] = cached
    return cached


def assemble_stiffness_p1(mesh: Mesh) -> sp.csr_matrix:
    cached = mesh.__dict__.get("_k1")
    if cached is None:
        dl = barycentric_gradients(mesh)
        local = mesh.signed_area[:, None, None] * np.einsum("eik,ejk->eij", dl, dl)
        t = mesh.triangles
        cached = _scatter(mesh, local, t, t, (mesh.n_vertices,) * 2)
        mesh.__dict__["_k1"] = cached
    return cached


def lumped_mass_p1(mesh: Mesh) -> np.ndarray:
    """Vertex weights of the trapezoidal (lumped) rule: patch area / 3."""
    return np.bincount(mesh.triangles.ravel(), weights=np.repeat(mesh.signed_area / 3.0, 3), minlength=mesh.n_vertices)


def _mass_solver(mesh):
    cached = mesh.__dict__.get("_m1_lu")
    if cached is None:
        cached = spla.splu(assemble_mass_p1(mesh).tocsc())
        mesh.__dict__["_m1_lu"] = cached
    return cached


def integrate_p1(mesh: Mesh, values) -> float:
    return float(lumped_mass_p1(mesh) @ np.asarray(values))


def l2_project_function(mesh: Mesh, func, degree: int = 6) -> ScalarFieldP1:
    """L2 projection of ``func(x, y)`` onto P1."""
    rule = quadrature(degree)
    x = physical_points(mesh, rule.points)
    fq = func(x[..., 0], x[..., 1])
    w = 2.0 * mesh.signed_area[:, None] * rule.weights[None, :]
    loc = np.einsum("eq,qi->ei", w * fq, rule.points)
    b = np.bincount(mesh.triangles.ravel(), weights=loc.ravel(), minlength=mesh.n_vertices)
    return ScalarFieldP1(mesh, _mass_solver(mesh).solve(b))


# -- transfer -----------------------------------------------------------------
def _relation(source: Mesh, target: Mesh):
    if target is source:
        return "identity", None
    o = target.origin
    if o is not None and o.source is source:
        return o.kind, o
    raise MeshError("target mesh is not derived from the source mesh by one refine/coarsen step")


def _bary_of_points(mesh: Mesh, tri, pts):
    dl = barycentric_gradients(mesh)[tri]
    d = pts - mesh.vertices[mesh.triangles[tri, 0]]
    l12 = np.einsum("eik,ek->ei", dl[:, 1:], d)
    return np.column_stack([1.0 - l12.sum(axis=1), l12])


def transfer_p1(field: ScalarFieldP1, target: Mesh) -> ScalarFieldP1:
    """L2 projection of ``field`` onto P1 of ``target``.

    For a refinement the spaces are nested and the projection is exact
    interpolation; for a coarsening the load vector is integrated exactly on
    the fine triangles.
    """
    kind, tmap = _relation(field.mesh, target)
    if kind == "identity":
        return ScalarFieldP1(target, np.array(field.values, dtype=float))
    src = field.mesh
    if kind == "refine":
        vals = np.full(target.n_vertices, np.nan)
        vals[: src.n_vertices] = field.values
        par = target.vertex_parents
        todo = np.arange(src.n_vertices, target.n_vertices)
        while todo.size:
            # midpoints of midpoints need their parents first
            v = vals[par[todo]]
            ready = ~np.isnan(v).any(axis=1)
            vals[todo[ready]] = 0.5 * (v[ready, 0] + v[ready, 1])
            todo = todo[~ready]
        return ScalarFieldP1(target, vals)
    # coarsen: fine = source, coarse = target
    cont = tmap.containing
    fine_pts = src.vertices[src.triangles]  # (NTf, 3, 2)
    lam = np.stack([_bary_of_points(target, cont, fine_pts[:, i]) for i in range(3)], axis=1)  # (NTf, a, j)
    local_m = src.signed_area[:, None, None] * _P1_LOCAL_MASS[None]
    phi = field.values[src.triangles]
    loc = np.einsum("ea,eab,ebj->ej", phi, local_m, lam)
    b = np.bincount(target.triangles[cont].ravel(), weights=loc.ravel(), minlength=target.n_vertices)
    return ScalarFieldP1(target, _mass_solver(target).solve(b))


def transfer_p2(field: VectorFieldP2, target: Mesh) -> VectorFieldP2:
    """Nodal interpolation of a P2 field onto ``target`` (exact in both directions)."""
    kind, tmap = _relation(field.mesh, target)
    if kind == "identity":
        return VectorFieldP2(target, np.array(field.values, dtype=float))
    src = field.mesh
    tdofs = p2_dofs(target)
    tnodes = p2_node_coordinates(target)
    out = np.full((2, n_p2(target)), np.nan)
    sdofs = p2_dofs(src)
    if kind == "refine":
        anc = tmap.containing
        for j in range(6):
            pts = tnodes[tdofs[:, j]]
            lam = _bary_of_points(src, anc, pts)
            N = p2_values(lam)
            for c in range(2):
                out[c, tdofs[:, j]] = np.einsum("ea,ea->e", N, field.values[c][sdofs[anc]])
    else:
        cont = tmap.containing
        for j in range(6):
            pts = tnodes[tdofs[cont, j]]
            lam = _bary_of_points(src, np.arange(src.n_triangles), pts)
            inside = lam.min(axis=1) >= -1e-12
            N = p2_values(lam[inside])
            for c in range(2):
                out[c, tdofs[cont[inside], j]] = np.einsum("ea,ea->e", N, field.values[c][sdofs[inside]])
    if np.isnan(out).any():
        raise MeshError("P2 transfer left nodes without a containing source triangle")
    return VectorFieldP2(target, out)
