"""Conforming triangle meshes of a rectangle with newest-vertex bisection.

Triangles are stored *peak first*: for ``t = [p, a, b]`` the vertex ``p`` is
the newest vertex and ``(a, b)`` is the refinement edge.  Bisection of
``[p, a, b]`` at the midpoint ``m`` of ``(a, b)`` produces ``[m, p, a]``
(which keeps the parent's slot) and ``[m, b, p]`` (appended).  New vertices
are appended and remember the edge they bisect in ``vertex_parents``; that
record is what coarsening uses to recognise node stars and to restore the
parents exactly.

Meshes are immutable.  ``refine`` and ``coarsen`` return a new mesh together
with a :class:`TransferMap` describing how the triangles of the two meshes
nest; the new mesh also keeps that map (with a weak reference to its
source) in ``origin`` so that field transfer can check mesh relations.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from functools import cached_property

import numpy as np

SIDES = ("bottom", "right", "top", "left")
INTERIOR = -1


class MeshError(ValueError):
    """Invalid mesh input or operation."""


@dataclass(frozen=True)
class TransferMap:
    """Nesting information between a source mesh and the mesh derived from it.

    For ``kind == "refine"`` every new triangle lies inside one source
    triangle and ``containing[t_new]`` is that source triangle; source
    vertices keep their indices.  For ``kind == "coarsen"`` every source
    triangle lies inside one new triangle, ``containing[t_src]`` is that new
    triangle and ``vertex_map[v_src]`` is the new index (``-1`` if removed).
    """

    kind: str
    source_ref: weakref.ReferenceType
    containing: np.ndarray
    vertex_map: np.ndarray

    @property
    def source(self) -> "Mesh | None":
        return self.source_ref()


@dataclass(frozen=True)
class NodeStar:
    """Patch around a bisection vertex that one coarsening step can undo."""

    center: int
    triangles: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...]
    boundary: bool


@dataclass(frozen=True)
class Geometry:
    area: np.ndarray  # (NT,)
    h_T: np.ndarray  # (NT,) longest edge
    h_E: np.ndarray  # (NE,)
    normal: np.ndarray  # (NE, 2), lower -> higher triangle number, outward on the boundary


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Mesh:
    """Triangulation of the rectangle ``[0, width] x [0, height]``."""

    def __init__(self, vertices, triangles, vertex_parents=None, extent=None, origin=None):
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (NV, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise MeshError("triangles must have shape (NT, 3)")
        nv = len(vertices)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= nv):
            raise MeshError("triangle references a vertex out of range")
        if vertex_parents is None:
            vertex_parents = np.full((nv, 2), -1, dtype=np.int64)
        vertex_parents = np.asarray(vertex_parents, dtype=np.int64)
        if vertex_parents.shape != (nv, 2):
            raise MeshError("vertex_parents must have shape (NV, 2)")
        if extent is None:
            extent = (float(vertices[:, 0].max()), float(vertices[:, 1].max()))
        self.vertices = _readonly(vertices)
        self.triangles = _readonly(triangles)
        self.vertex_parents = _readonly(vertex_parents)
        self.extent = (float(extent[0]), float(extent[1]))
        self.origin = origin
        if np.any(self.signed_area <= 0.0):
            raise MeshError("triangles must have positive (counter-clockwise) orientation")

    # -- sizes -------------------------------------------------------------
    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def __repr__(self):
        return f"Mesh(NV={self.n_vertices}, NT={self.n_triangles}, extent={self.extent})"

    # -- connectivity ------------------------------------------------------
    @cached_property
    def signed_area(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def _edge_data(self):
        t = self.triangles
        nt = len(t)
        # local edge i is opposite local vertex i
        loc = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1).reshape(-1, 2)
        lo = loc.min(axis=1)
        hi = loc.max(axis=1)
        keys = lo * self.n_vertices + hi
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        tri_edges = rank[inverse.ravel()].reshape(nt, 3)
        edges = np.stack([lo, hi], axis=1)[first[order]]

        flat_e = tri_edges.ravel()
        flat_t = np.repeat(np.arange(nt), 3)
        counts = np.bincount(flat_e, minlength=len(edges))
        if np.any(counts > 2):
            raise MeshError("non-manifold mesh: edge shared by more than two triangles")
        srt = np.lexsort((flat_t, flat_e))
        edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        edge_tris[:, 0] = flat_t[srt[starts]]
        two = counts == 2
        edge_tris[two, 1] = flat_t[srt[starts[two] + 1]]
        return _readonly(edges), _readonly(tri_edges), _readonly(edge_tris)

    @property
    def edges(self) -> np.ndarray:
        """``(NE, 2)`` vertex pairs ``(lo, hi)`` in first-appearance order."""
        return self._edge_data[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """``(NT, 3)`` edge index opposite each local vertex."""
        return self._edge_data[1]

    @property
    def edge_tris(self) -> np.ndarray:
        """``(NE, 2)`` adjacent triangles, lower number first, ``-1`` on the boundary."""
        return self._edge_data[2]

    @cached_property
    def boundary_tag(self) -> np.ndarray:
        """Side index (see :data:`SIDES`) for boundary edges, ``-1`` for interior."""
        tag = np.full(self.n_edges, INTERIOR, dtype=np.int64)
        bnd = np.flatnonzero(self.edge_tris[:, 1] < 0)
        w, h = self.extent
        p = self.vertices[self.edges[bnd]]
        x0, x1 = p[:, 0, 0], p[:, 1, 0]
        y0, y1 = p[:, 0, 1], p[:, 1, 1]
        side = np.full(len(bnd), INTERIOR)
        side[(y0 == 0.0) & (y1 == 0.0)] = 0
        side[(x0 == w) & (x1 == w)] = 1
        side[(y0 == h) & (y1 == h)] = 2
        side[(x0 == 0.0) & (x1 == 0.0)] = 3
        if np.any(side == INTERIOR):
            raise MeshError("boundary edge not on the rectangle: mesh is not conforming")
        tag[bnd] = side
        return _readonly(tag)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_tag >= 0].ravel()] = True
        return _readonly(mask)

    def geometry(self) -> Geometry:
        return self._geometry

    @cached_property
    def _geometry(self) -> Geometry:
        p = self.vertices
        t = self.triangles
        e = self.edges
        el = np.linalg.norm(p[t[:, [2, 0, 1]]] - p[t[:, [1, 2, 0]]], axis=2)
        h_T = el.max(axis=1)
        vec = p[e[:, 1]] - p[e[:, 0]]
        h_E = np.linalg.norm(vec, axis=1)
        nrm = np.stack([vec[:, 1], -vec[:, 0]], axis=1) / h_E[:, None]
        cen = p[t].mean(axis=1)
        et = self.edge_tris
        mid = 0.5 * (p[e[:, 0]] + p[e[:, 1]])
        inner = et[:, 1] >= 0
        direction = np.where(inner[:, None], cen[np.maximum(et[:, 1], 0)] - cen[et[:, 0]], mid - cen[et[:, 0]])
        flip = np.einsum("ij,ij->i", nrm, direction) < 0
        nrm[flip] *= -1.0
        return Geometry(
            area=_readonly(self.signed_area.copy()),
            h_T=_readonly(h_T),
            h_E=_readonly(h_E),
            normal=_readonly(nrm),
        )

    # -- checks ------------------------------------------------------------
    def check(self, rtol: float = 1e-12) -> None:
        """Raise :class:`MeshError` unless the mesh is conforming and tiles the rectangle."""
        _ = self.boundary_tag  # raises on hanging nodes / stray boundary edges
        total = float(self.signed_area.sum())
        w, h = self.extent
        if abs(total - w * h) > rtol * w * h:
            raise MeshError(f"triangle areas sum to {total}, expected {w * h}")

    def min_angle(self) -> float:
        p = self.vertices[self.triangles]
        angles = []
        for i in range(3):
            u = p[:, (i + 1) % 3] - p[:, i]
            v = p[:, (i + 2) % 3] - p[:, i]
            c = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.arccos(np.clip(c, -1.0, 1.0)))
        return float(np.min(angles))

    def shape_ratio(self) -> float:
        g = self.geometry()
        return float(np.max(g.h_T**2 / g.area))


def build_rectangle_mesh(width: float, height: float, nx: int, ny: int) -> Mesh:
    """Structured ``nx x ny`` grid with alternating diagonals.

    Each initial triangle gets its longest edge as refinement edge (ties go
    to the edge whose opposite vertex has the lowest index).
    """
    if not (width > 0 and height > 0):
        raise MeshError("width and height must be positive")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError("nx and ny must be integers >= 1")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    xs[-1], ys[-1] = width, height
    X, Y = np.meshgrid(xs, ys)
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)

    tris = []
    for j in range(ny):
        for i in range(nx):
            v00 = j * (nx + 1) + i
            v10, v01, v11 = v00 + 1, v00 + nx + 1, v00 + nx + 2
            if (i + j) % 2 == 0:
                tris += [(v00, v10, v11), (v00, v11, v01)]
            else:
                tris += [(v00, v10, v01), (v10, v11, v01)]
    tris = np.array(tris, dtype=np.int64)

    p = verts[tris]
    # length of the edge opposite local vertex k
    opp = np.stack([np.linalg.norm(p[:, (k + 2) % 3] - p[:, (k + 1) % 3], axis=1) for k in range(3)], axis=1)
    longest = opp.max(axis=1, keepdims=True)
    cand = np.isclose(opp, longest, rtol=1e-12, atol=0.0)
    vid = np.where(cand, tris, np.iinfo(np.int64).max)
    peak = np.argmin(vid, axis=1)
    rot = (peak[:, None] + np.arange(3)[None, :]) % 3
    tris = np.take_along_axis(tris, rot, axis=1)
    return Mesh(verts, tris, extent=(width, height))


# -- refinement ---------------------------------------------------------------
def _edge_keys(a, b, nv_cap):
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    return lo * nv_cap + hi


def refine(mesh: Mesh, marked) -> tuple[Mesh, TransferMap]:
    """Newest-vertex bisection of the marked triangles plus conforming closure."""
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64))
    nt, nv = mesh.n_triangles, mesh.n_vertices
    if marked.size and (marked.min() < 0 or marked.max() >= nt):
        raise MeshError("marked triangle index out of range")

    te = mesh.tri_edges
    split = np.zeros(mesh.n_edges, dtype=bool)
    split[te[marked, 0]] = True
    while True:
        has = split[te].any(axis=1)
        new = has & ~split[te[:, 0]]
        if not new.any():
            break
        split[te[new, 0]] = True

    if not split.any():
        tmap = TransferMap("refine", weakref.ref(mesh), np.arange(nt), np.arange(nv))
        return Mesh(mesh.vertices, mesh.triangles, mesh.vertex_parents, mesh.extent, origin=tmap), tmap

    split_edges = mesh.edges[split]
    n_new = len(split_edges)
    mids = nv + np.arange(n_new)
    verts = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[split_edges[:, 0]] + mesh.vertices[split_edges[:, 1]])])
    parents = np.concatenate([mesh.vertex_parents, split_edges])

    cap = nv + n_new
    skeys = _edge_keys(split_edges[:, 0], split_edges[:, 1], cap)
    order = np.argsort(skeys)
    skeys = skeys[order]
    smids = mids[order]

    tris = mesh.triangles.copy()
    anc = np.arange(nt)
    while True:
        k = _edge_keys(tris[:, 1], tris[:, 2], cap)
        pos = np.clip(np.searchsorted(skeys, k), 0, len(skeys) - 1)
        hit = np.flatnonzero(skeys[pos] == k)
        if hit.size == 0:
            break
        m = smids[pos[hit]]
        p, a, b = tris[hit, 0], tris[hit, 1], tris[hit, 2]
        child2 = np.stack([m, b, p], axis=1)
        tris[hit] = np.stack([m, p, a], axis=1)
        tris = np.concatenate([tris, child2])
        anc = np.concatenate([anc, anc[hit]])

    vmap = np.concatenate([np.arange(nv), np.full(n_new, -1)])
    tmap = TransferMap("refine", weakref.ref(mesh), anc, vmap)
    return Mesh(verts, tris, parents, mesh.extent, origin=tmap), tmap


def refine_uniform(mesh: Mesh, times: int = 1) -> Mesh:
    """Bisect every triangle ``times`` times (two bisections halve ``h``)."""
    for _ in range(times):
        mesh, _ = refine(mesh, np.arange(mesh.n_triangles))
    return mesh


# -- coarsening ---------------------------------------------------------------
def _star_pairs(tris, center, members, parents):
    """Pair the children ``[m, p, a]`` / ``[m, b, p]`` of each bisected parent."""
    pa = set(parents)
    first = {}
    second = {}
    for t in members:
        _, x, y = tris[t]
        if y in pa and x not in pa:
            first[x] = t
        elif x in pa and y not in pa:
            second[y] = t
        else:
            return None
    if set(first) != set(second) or len(first) * 2 != len(members):
        return None
    pairs = []
    for p in sorted(first):
        c1, c2 = first[p], second[p]
        if {tris[c1][2], tris[c2][1]} != pa:
            return None
        pairs.append((int(c1), int(c2)))
    return tuple(sorted(pairs))


def find_node_stars(mesh: Mesh) -> list[NodeStar]:
    """Bisection vertices whose whole patch can be coarsened in one step."""
    t = mesh.triangles
    nv = mesh.n_vertices
    count = np.bincount(t.ravel(), minlength=nv)
    peak_count = np.bincount(t[:, 0], minlength=nv)
    newest = mesh.vertex_parents[:, 0] >= 0
    bnd = mesh.boundary_vertices
    want = np.where(bnd, 2, 4)
    cand = np.flatnonzero(newest & (count == peak_count) & (count == want))
    if cand.size == 0:
        return []
    by_peak = np.argsort(t[:, 0], kind="stable")
    starts = np.searchsorted(t[by_peak, 0], cand)
    stars = []
    for c, s in zip(cand, starts):
        members = by_peak[s : s + count[c]]
        pairs = _star_pairs(t, c, members, tuple(mesh.vertex_parents[c]))
        if pairs is None:
            continue
        stars.append(NodeStar(int(c), tuple(sorted(int(m) for m in members)), pairs, bool(bnd[c])))
    return stars


def coarsen(mesh: Mesh, stars) -> tuple[Mesh, TransferMap]:
    """Merge each node star back into its parents and drop the centre vertex."""
    stars = list(stars)
    nt, nv = mesh.n_triangles, mesh.n_vertices
    t = mesh.triangles
    if not stars:
        tmap = TransferMap("coarsen", weakref.ref(mesh), np.arange(nt), np.arange(nv))
        return Mesh(mesh.vertices, mesh.triangles, mesh.vertex_parents, mesh.extent, origin=tmap), tmap

    used = np.zeros(nt, dtype=bool)
    centers = []
    for st in stars:
        tri_idx = np.asarray(st.triangles, dtype=np.int64)
        if tri_idx.min() < 0 or tri_idx.max() >= nt:
            raise MeshError(f"stale node star at vertex {st.center}")
        if used[tri_idx].any():
            raise MeshError("node stars overlap")
        used[tri_idx] = True
        if st.center >= nv or mesh.vertex_parents[st.center, 0] < 0:
            raise MeshError(f"stale node star at vertex {st.center}")
        if np.any(t[tri_idx, 0] != st.center) or np.count_nonzero(t == st.center) != len(tri_idx):
            raise MeshError(f"stale node star at vertex {st.center}")
        if _star_pairs(t, st.center, tri_idx, tuple(mesh.vertex_parents[st.center])) != tuple(sorted(st.pairs)):
            raise MeshError(f"stale node star at vertex {st.center}")
        centers.append(st.center)

    tris = t.copy()
    keep = np.ones(nt, dtype=bool)
    merged_into = np.arange(nt)
    for st in stars:
        for c1, c2 in st.pairs:
            p, a = t[c1, 1], t[c1, 2]
            b = t[c2, 1]
            tris[c1] = (p, a, b)
            keep[c2] = False
            merged_into[c2] = c1
    new_tri_index = np.cumsum(keep) - 1
    containing = new_tri_index[merged_into]

    vkeep = np.ones(nv, dtype=bool)
    vkeep[centers] = False
    vmap = np.where(vkeep, np.cumsum(vkeep) - 1, -1)
    tris = vmap[tris[keep]]
    vp = mesh.vertex_parents[vkeep]
    vp = np.where(vp >= 0, vmap[np.maximum(vp, 0)], -1)
    if np.any((mesh.vertex_parents[vkeep] >= 0) & (vp < 0)):
        raise MeshError("coarsening would remove a vertex that others were bisected from")
    tmap = TransferMap("coarsen", weakref.ref(mesh), containing, vmap)
    return Mesh(mesh.vertices[vkeep], tris, vp, mesh.extent, origin=tmap), tmap
