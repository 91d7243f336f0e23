"""Assembly of the coupled velocity/pressure/phase-field/chemical-potential system.

Unknown vector layout (see :class:`Layout`)::

    [ v_x (NP2) | v_y (NP2) | p (NV) | lambda (1) | phi (NV) | mu (NV) ]

``lambda`` is the Lagrange multiplier enforcing a zero-mean pressure.  The
only nonlinear term is ``F_+'(phi)``; it is integrated with the lumped
(vertex) rule so that the semi-smooth Newton iteration acts on a per-vertex
active set.  :meth:`CoupledSystem.linearized` adds that term for a given
active set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .fem import (
    ScalarFieldP1,
    VectorFieldP2,
    assemble_mass_p1,
    assemble_stiffness_p1,
    barycentric_gradients,
    lumped_mass_p1,
    n_p2,
    p2_dofs,
    p2_gradients,
    p2_node_coordinates,
    p2_values,
    physical_points,
    quadrature,
)
from .mesh import SIDES, Mesh
from .physics import MaterialParams, WindForce

QUAD_DEGREE = 6


# -- quadrature data -------------------------------------------------------------
@dataclass(frozen=True)
class QuadData:
    w: np.ndarray  # (E, Q) weights times Jacobian
    x: np.ndarray  # (E, Q, 2)
    N1: np.ndarray  # (Q, 3)
    N2: np.ndarray  # (Q, 6)
    G2: np.ndarray  # (E, Q, 6, 2)
    dlam: np.ndarray  # (E, 3, 2)


def quad_data(mesh: Mesh) -> QuadData:
    cached = mesh.__dict__.get("_quad")
    if cached is None:
        rule = quadrature(QUAD_DEGREE)
        dlam = barycentric_gradients(mesh)
        cached = QuadData(
            w=2.0 * mesh.signed_area[:, None] * rule.weights[None, :],
            x=physical_points(mesh, rule.points),
            N1=rule.points.copy(),
            N2=p2_values(rule.points),
            G2=p2_gradients(rule.points, dlam),
            dlam=dlam,
        )
        mesh.__dict__["_quad"] = cached
    return cached


def p1_at_quad(mesh: Mesh, values) -> np.ndarray:
    return np.asarray(values)[mesh.triangles] @ quad_data(mesh).N1.T


def p2_at_quad(mesh: Mesh, values) -> np.ndarray:
    """(2, NP2) -> (E, Q, 2)."""
    q = quad_data(mesh)
    loc = np.asarray(values)[:, p2_dofs(mesh)]  # (2, E, 6)
    return np.einsum("cea,qa->eqc", loc, q.N2)


def p2_grad_at_quad(mesh: Mesh, values) -> np.ndarray:
    """(2, NP2) -> (E, Q, 2, 2) with [..., c, k] = d v_c / d x_k."""
    q = quad_data(mesh)
    loc = np.asarray(values)[:, p2_dofs(mesh)]
    return np.einsum("cea,eqak->eqck", loc, q.G2)


# -- layout / boundary data --------------------------------------------------------
@dataclass(frozen=True)
class Layout:
    np2: int
    nv: int

    @property
    def v(self):
        return slice(0, 2 * self.np2)

    @property
    def p(self):
        return slice(2 * self.np2, 2 * self.np2 + self.nv)

    @property
    def lam(self) -> int:
        return 2 * self.np2 + self.nv

    @property
    def phi(self):
        s = 2 * self.np2 + self.nv + 1
        return slice(s, s + self.nv)

    @property
    def mu(self):
        s = 2 * self.np2 + 2 * self.nv + 1
        return slice(s, s + self.nv)

    @property
    def size(self) -> int:
        return 2 * self.np2 + 3 * self.nv + 1

    @property
    def flow_size(self) -> int:
        return 2 * self.np2 + self.nv + 1


@dataclass(frozen=True)
class BoundarySpec:
    """Velocity boundary data per rectangle side.

    Sides absent from ``tangential`` are no-slip.  A tangential entry is a
    constant or a function of the coordinate along the side; the normal
    component is always zero.  Corners take the no-slip value whenever one
    adjacent side is no-slip.
    """

    tangential: dict = field(default_factory=dict)

    def __post_init__(self):
        for side in self.tangential:
            if side not in SIDES:
                raise ValueError(f"unknown boundary side {side!r}; expected one of {SIDES}")


def dirichlet_velocity(mesh: Mesh, spec: BoundarySpec | None = None):
    """Flat velocity DOF indices on the boundary and their prescribed values."""
    spec = spec or BoundarySpec()
    np2 = n_p2(mesh)
    tag = mesh.boundary_tag
    bnd_e = np.flatnonzero(tag >= 0)
    node_side = {}
    for e in bnd_e:
        side = int(tag[e])
        for node in (int(mesh.edges[e, 0]), int(mesh.edges[e, 1]), mesh.n_vertices + int(e)):
            node_side.setdefault(node, set()).add(side)
    nodes = np.array(sorted(node_side), dtype=np.int64)
    xy = p2_node_coordinates(mesh)[nodes]
    vals = np.zeros((len(nodes), 2))
    for n, node in enumerate(nodes):
        sides = sorted(node_side[node])
        names = [SIDES[s] for s in sides]
        if any(nm not in spec.tangential for nm in names):
            continue
        name = names[0]
        u = spec.tangential[name]
        along = xy[n, 0] if name in ("bottom", "top") else xy[n, 1]
        speed = float(u(along)) if callable(u) else float(u)
        if name in ("bottom", "top"):
            vals[n, 0] = speed
        else:
            vals[n, 1] = speed
    dofs = np.concatenate([nodes, np2 + nodes])
    return dofs, np.concatenate([vals[:, 0], vals[:, 1]])


# -- small helpers -------------------------------------------------------------------
class _Triplets:
    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, local):
        """``local`` (E, nr, nc) scattered to ``rows`` (E, nr) x ``cols`` (E, nc)."""
        I = np.broadcast_to(rows[:, :, None], local.shape)
        J = np.broadcast_to(cols[:, None, :], local.shape)
        self.r.append(I.ravel())
        self.c.append(J.ravel())
        self.v.append(np.asarray(local).ravel())

    def add_sparse(self, mat, row_off, col_off):
        m = mat.tocoo()
        self.r.append(m.row + row_off)
        self.c.append(m.col + col_off)
        self.v.append(m.data)

    def matrix(self, n, m=None):
        m = n if m is None else m
        r = np.concatenate(self.r)
        c = np.concatenate(self.c)
        v = np.concatenate(self.v)
        return sp.coo_matrix((v, (r, c)), shape=(n, m)).tocsr()


def _scatter_vector(rows, local, n):
    return np.bincount(rows.ravel(), weights=local.ravel(), minlength=n)


def flux_J(mesh: Mesh, mu_values, params: MaterialParams) -> np.ndarray:
    """J = -(d rho / d phi) m grad mu, constant per triangle: (NT, 2)."""
    grad_mu = np.einsum("eik,ei->ek", barycentric_gradients(mesh), np.asarray(mu_values)[mesh.triangles])
    return -params.drho * params.b * grad_mu


def assemble_flux_J(phi: ScalarFieldP1, mu: ScalarFieldP1, params: MaterialParams) -> np.ndarray:
    if phi.mesh is not mu.mesh:
        raise ValueError("phi and mu must live on the same mesh")
    return flux_J(mu.mesh, mu.values, params)


def trilinear_a(u: VectorFieldP2, v: VectorFieldP2, w: VectorFieldP2) -> float:
    """a(u, v, w) = 1/2 ((u.grad) v, w) - 1/2 ((u.grad) w, v)."""
    mesh = u.mesh
    if v.mesh is not mesh or w.mesh is not mesh:
        raise ValueError("all three fields must share one mesh")
    q = quad_data(mesh)
    uq = p2_at_quad(mesh, u.values)
    vq = p2_at_quad(mesh, v.values)
    wq = p2_at_quad(mesh, w.values)
    gv = p2_grad_at_quad(mesh, v.values)
    gw = p2_grad_at_quad(mesh, w.values)
    first = np.einsum("eq,eqk,eqck,eqc->", q.w, uq, gv, wq)
    second = np.einsum("eq,eqk,eqck,eqc->", q.w, uq, gw, vq)
    return 0.5 * first - 0.5 * second


def force_at_quad(mesh: Mesh, force: WindForce | Callable | None) -> np.ndarray:
    q = quad_data(mesh)
    if force is None:
        return np.zeros(q.x.shape)
    f1, f2 = force(q.x[..., 0], q.x[..., 1])
    return np.stack([np.broadcast_to(f1, q.x.shape[:2]), np.broadcast_to(f2, q.x.shape[:2])], axis=-1)


# -- momentum blocks -------------------------------------------------------------------
def _momentum_matrix(mesh, trip, mass_coef, eta_q, adv_q, skew=True):
    """Velocity-velocity block: mass, viscous and convection parts."""
    q = quad_data(mesh)
    dofs = p2_dofs(mesh)
    np2 = n_p2(mesh)
    Mloc = _kernels.weighted_mass(q.w * mass_coef, q.N2)
    K = _kernels.weighted_gradgrad(q.w * eta_q, q.G2)
    lap = K[:, 0, 0] + K[:, 1, 1]
    if adv_q is not None:
        C = _kernels.advection(q.w[..., None] * adv_q, q.G2, q.N2)
        conv = 0.5 * (C - C.transpose(0, 2, 1)) if skew else C
    else:
        conv = 0.0
    for d in range(2):
        for c in range(2):
            local = K[:, c, d].copy()
            if c == d:
                local += Mloc + lap + conv
            trip.add(dofs + d * np2, dofs + c * np2, local)


def _pressure_blocks(mesh, trip, lay):
    """-(p, div w) and -(div v, q) plus the mean-value multiplier."""
    q = quad_data(mesh)
    dofs = p2_dofs(mesh)
    t = mesh.triangles
    m1 = lumped_mass_p1(mesh)
    for c in range(2):
        # B[e, i, s] = -int psi_i d_c phi_s
        B = -np.einsum("eq,qi,eqs->eis", q.w, q.N1, q.G2[..., c])
        trip.add(t + lay.p.start, dofs + c * lay.np2, B)
        trip.add(dofs + c * lay.np2, t + lay.p.start, B.transpose(0, 2, 1))
    idx = np.arange(lay.nv)
    trip.r += [idx + lay.p.start, np.full(lay.nv, lay.lam)]
    trip.c += [np.full(lay.nv, lay.lam), idx + lay.p.start]
    trip.v += [m1, m1]


def _dirichlet_rows(A, rhs, dofs, values):
    mask = np.zeros(A.shape[0])
    mask[dofs] = 1.0
    A = sp.diags(1.0 - mask) @ A + sp.diags(mask)
    rhs = rhs.copy()
    rhs[dofs] = values
    return A.tocsr(), rhs


# -- system containers -------------------------------------------------------------------
@dataclass
class CoupledSystem:
    """Linear part of one step plus what the semi-smooth Newton update needs."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    phi_slice: slice
    mu_slice: slice
    lumped: np.ndarray
    coef_plus: float  # (sigma / eps) * s
    layout: Layout | None = None
    dirichlet: tuple | None = None

    @property
    def weights(self) -> np.ndarray:
        """Vertex weights of the pressure mean constraint."""
        return self.lumped

    def linearized(self, active):
        """Matrix and right-hand side with ``F_+'`` linearised on ``active``.

        ``active`` holds +1 where phi > 1, -1 where phi < -1 and 0 elsewhere.
        """
        active = np.asarray(active)
        on = np.flatnonzero(active)
        if on.size == 0:
            return self.matrix, self.rhs
        d = self.coef_plus * self.lumped[on]
        extra = sp.coo_matrix((d, (on + self.mu_slice.start, on + self.phi_slice.start)), shape=self.matrix.shape)
        rhs = self.rhs.copy()
        rhs[on + self.mu_slice.start] += d * active[on]
        return (self.matrix + extra).tocsr(), rhs

    def nonlinear_residual(self, x):
        """A x - b with the exact lumped ``F_+'`` (zero at a converged solution)."""
        phi = x[self.phi_slice]
        r = self.matrix @ x - self.rhs
        lam = np.maximum(0.0, phi - 1.0) + np.minimum(0.0, phi + 1.0)
        r[self.mu_slice] += self.coef_plus * self.lumped * lam
        return r


@dataclass
class StepInputs:
    """Previous-level data already transferred to the mesh of the new step.

    ``phi_old`` is the projected phase field of level k, ``rho_prev`` the
    nodal values of the level k-1 density.
    """

    mesh: Mesh
    phi_old: np.ndarray
    mu_old: np.ndarray
    v_old: np.ndarray  # (2, NP2)
    rho_prev: np.ndarray

    def __post_init__(self):
        nv, np2 = self.mesh.n_vertices, n_p2(self.mesh)
        for name in ("phi_old", "mu_old", "rho_prev"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (nv,):
                raise ValueError(f"{name} must have one value per vertex")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        self.v_old = np.asarray(self.v_old, dtype=float)
        if self.v_old.shape != (2, np2):
            raise ValueError("v_old must have shape (2, NV + NE)")
        if not np.all(np.isfinite(self.v_old)):
            raise ValueError("v_old contains non-finite values")


def assemble_step_system(
    inputs: StepInputs,
    params: MaterialParams,
    tau: float,
    force=None,
    bc: BoundarySpec | None = None,
    transport: str = "advective",
) -> CoupledSystem:
    """Linear part of one step of the two-step scheme (levels k-1, k -> k+1)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    mesh = inputs.mesh
    q = quad_data(mesh)
    t = mesh.triangles
    dofs = p2_dofs(mesh)
    lay = Layout(n_p2(mesh), mesh.n_vertices)
    trip = _Triplets()
    rhs = np.zeros(lay.size)

    phi_q = p1_at_quad(mesh, inputs.phi_old)
    rho_q = params.density(phi_q)
    rho_prev_q = p1_at_quad(mesh, inputs.rho_prev)
    eta_q = params.viscosity(phi_q)
    v_old_q = p2_at_quad(mesh, inputs.v_old)
    J = flux_J(mesh, inputs.mu_old, params)
    b_q = rho_q[..., None] * v_old_q + J[:, None, :]

    _momentum_matrix(mesh, trip, (rho_q + rho_prev_q) / (2.0 * tau), eta_q, b_q, skew=True)
    _pressure_blocks(mesh, trip, lay)

    grad_phi = np.einsum("eik,ei->ek", q.dlam, inputs.phi_old[t])
    # momentum row (t, d), mu column j: -int psi_j d_d phi_old phi_t
    base = np.einsum("eq,qt,qj->etj", q.w, q.N2, q.N1)
    for d in range(2):
        G = -base * grad_phi[:, d, None, None]
        trip.add(dofs + d * lay.np2, t + lay.mu.start, G)
        if transport == "advective":
            trip.add(t + lay.phi.start, dofs + d * lay.np2, -G.transpose(0, 2, 1))
        elif transport == "ibp":
            # -(v phi_old, grad Phi)
            T = -np.einsum("eq,qs,eq,ei->eis", q.w, q.N2, phi_q, q.dlam[:, :, d])
            trip.add(t + lay.phi.start, dofs + d * lay.np2, T)
        else:
            raise ValueError("transport must be 'advective' or 'ibp'")

    M1 = assemble_mass_p1(mesh)
    K1 = assemble_stiffness_p1(mesh)
    trip.add_sparse(M1 / tau, lay.phi.start, lay.phi.start)
    trip.add_sparse(params.b * K1, lay.phi.start, lay.mu.start)
    trip.add_sparse(params.sigma * params.eps * K1, lay.mu.start, lay.phi.start)
    trip.add_sparse(-M1, lay.mu.start, lay.mu.start)

    # right-hand side
    Mprev = _kernels.weighted_mass(q.w * rho_prev_q / tau, q.N2)
    g = np.asarray(params.gravity)
    f_q = force_at_quad(mesh, force)
    for c in range(2):
        loc = np.einsum("eab,eb->ea", Mprev, inputs.v_old[c][dofs])
        src = rho_q * g[c] + f_q[..., c]
        loc += np.einsum("eq,eq,qa->ea", q.w, src, q.N2)
        rhs[c * lay.np2 : (c + 1) * lay.np2] = _scatter_vector(dofs, loc, lay.np2)
    rhs[lay.phi] = M1 @ inputs.phi_old / tau
    rhs[lay.mu] = (params.sigma / params.eps) * (M1 @ inputs.phi_old)

    A = trip.matrix(lay.size)
    ddofs, dvals = dirichlet_velocity(mesh, bc)
    A, rhs = _dirichlet_rows(A, rhs, ddofs, dvals)
    return CoupledSystem(
        matrix=A,
        rhs=rhs,
        phi_slice=lay.phi,
        mu_slice=lay.mu,
        lumped=lumped_mass_p1(mesh),
        coef_plus=params.sigma / params.eps * params.s,
        layout=lay,
        dirichlet=(ddofs, dvals),
    )


# -- initialization (k = 0) -------------------------------------------------------------
def assemble_ch_init(mesh: Mesh, phi0, v0, params: MaterialParams, tau: float) -> CoupledSystem:
    """Cahn-Hilliard part of the first step in the unknowns ``[phi | mu]``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    nv = mesh.n_vertices
    phi0 = np.asarray(phi0, dtype=float)
    q = quad_data(mesh)
    t = mesh.triangles
    M1 = assemble_mass_p1(mesh)
    K1 = assemble_stiffness_p1(mesh)
    A = sp.bmat([[M1 / tau, params.b * K1], [params.sigma * params.eps * K1, -M1]], format="csr")
    grad_phi = np.einsum("eik,ei->ek", q.dlam, phi0[t])
    v_q = p2_at_quad(mesh, v0)
    adv = np.einsum("eqk,ek->eq", v_q, grad_phi)
    transport = _scatter_vector(t, np.einsum("eq,eq,qi->ei", q.w, adv, q.N1), nv)
    rhs = np.concatenate([M1 @ phi0 / tau - transport, (params.sigma / params.eps) * (M1 @ phi0)])
    return CoupledSystem(
        matrix=A,
        rhs=rhs,
        phi_slice=slice(0, nv),
        mu_slice=slice(nv, 2 * nv),
        lumped=lumped_mass_p1(mesh),
        coef_plus=params.sigma / params.eps * params.s,
    )


def assemble_momentum_init(
    mesh: Mesh,
    v0,
    phi0,
    phi1,
    mu1,
    params: MaterialParams,
    tau: float,
    force=None,
    bc: BoundarySpec | None = None,
):
    """Momentum part of the first step in ``[v_x | v_y | p | lambda]``.

    Uses the already computed ``(phi1, mu1)``; returns ``(matrix, rhs, layout)``.
    """
    q = quad_data(mesh)
    t = mesh.triangles
    dofs = p2_dofs(mesh)
    lay = Layout(n_p2(mesh), mesh.n_vertices)
    trip = _Triplets()
    v0 = np.asarray(v0, dtype=float)
    rho0_q = params.density(p1_at_quad(mesh, phi0))
    phi1_q = p1_at_quad(mesh, phi1)
    rho1_q = params.density(phi1_q)
    eta1_q = params.viscosity(phi1_q)
    v0_q = p2_at_quad(mesh, v0)
    J1 = flux_J(mesh, mu1, params)
    b_q = rho0_q[..., None] * v0_q + J1[:, None, :]
    _momentum_matrix(mesh, trip, rho1_q / tau, eta1_q, b_q, skew=False)
    _pressure_blocks(mesh, trip, lay)
    A = trip.matrix(lay.flow_size)

    M = _kernels.weighted_mass(q.w * rho1_q / tau, q.N2)
    grad_phi1 = np.einsum("eik,ei->ek", q.dlam, np.asarray(phi1)[t])
    mu1_q = p1_at_quad(mesh, mu1)
    g = np.asarray(params.gravity)
    f_q = force_at_quad(mesh, force)
    rhs = np.zeros(lay.flow_size)
    for c in range(2):
        loc = np.einsum("eab,eb->ea", M, v0[c][dofs])
        src = mu1_q * grad_phi1[:, c, None] + rho1_q * g[c] + f_q[..., c]
        loc += np.einsum("eq,eq,qa->ea", q.w, src, q.N2)
        rhs[c * lay.np2 : (c + 1) * lay.np2] = _scatter_vector(dofs, loc, lay.np2)
    ddofs, dvals = dirichlet_velocity(mesh, bc)
    A, rhs = _dirichlet_rows(A, rhs, ddofs, dvals)
    return A, rhs, lay


def assemble_init_systems(v0, phi0, mesh, params, tau):
    """CH system of the first step; the momentum system is built once (phi1, mu1) exist."""
    ch = assemble_ch_init(mesh, phi0, v0, params, tau)

    def momentum(phi1, mu1, force=None, bc=None):
        return assemble_momentum_init(mesh, v0, phi0, phi1, mu1, params, tau, force=force, bc=bc)

    return ch, momentum


def apply_boundary_conditions(matrix, rhs, mesh: Mesh, spec: BoundarySpec | None = None):
    """Replace velocity rows on the boundary by identity rows with the prescribed values."""
    dofs, vals = dirichlet_velocity(mesh, spec)
    return _dirichlet_rows(sp.csr_matrix(matrix), np.asarray(rhs, dtype=float), dofs, vals)
