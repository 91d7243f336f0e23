"""Residual error indicators, marking and energy-safe mesh adaptation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import flux_J, force_at_quad, p1_at_quad, p2_at_quad, p2_grad_at_quad, quad_data
from .fem import ScalarFieldP1, barycentric_gradients, p2_dofs, p2_gradients, p2_hessians, transfer_p1
from .mesh import Mesh, NodeStar, coarsen, find_node_stars, refine
from .physics import MaterialParams, f_plus, f_plus_prime
from .solver import State, ginzburg_landau, transfer_state

_GAUSS_T, _GAUSS_W = np.polynomial.legendre.leggauss(3)
_GAUSS_T = 0.5 * (_GAUSS_T + 1.0)
_GAUSS_W = 0.5 * _GAUSS_W


@dataclass(frozen=True)
class Residuals:
    """Element residuals at the quadrature points of the degree-6 rule."""

    r1: np.ndarray  # (NT, Q, 2)
    r2: np.ndarray  # (NT, Q)
    r3: np.ndarray  # (NT, Q)


@dataclass(frozen=True)
class IndicatorField:
    eta_T: np.ndarray  # (3, NT)
    eta_E: np.ndarray  # (3, NE)
    tau: float
    eta_min: float
    mob_min: float
    sigma: float
    eps: float

    @property
    def weights_T(self) -> np.ndarray:
        return np.array([1.0 / (self.tau * self.eta_min), 1.0 / (self.tau * self.mob_min), 1.0 / (self.sigma * self.eps)])

    @property
    def weights_E(self) -> np.ndarray:
        return np.array([self.tau / self.eta_min, self.tau / self.mob_min, self.sigma * self.eps])

    def group_sums(self) -> np.ndarray:
        """Unweighted sums of squares: rows T1, E1, T2, E2, T3, E3."""
        sT = (self.eta_T**2).sum(axis=1)
        sE = (self.eta_E**2).sum(axis=1)
        return np.array([sT[0], sE[0], sT[1], sE[1], sT[2], sE[2]])

    @property
    def eta_omega_sq(self) -> float:
        sT = (self.eta_T**2).sum(axis=1)
        sE = (self.eta_E**2).sum(axis=1)
        return float(self.weights_T @ sT + self.weights_E @ sE)


# -- residuals -----------------------------------------------------------------------
def compute_residuals(state: State, params: MaterialParams, tau: float, force=None) -> Residuals:
    """Strong element residuals of the step that produced ``state``."""
    inp = state.inputs
    if inp is None:
        raise ValueError("state has no step inputs")
    mesh = state.mesh
    q = quad_data(mesh)
    t = mesh.triangles
    dlam = q.dlam

    phi_old_q = p1_at_quad(mesh, inp.phi_old)
    rho_k = params.density(phi_old_q)
    rho_km1 = p1_at_quad(mesh, inp.rho_prev)
    v = p2_at_quad(mesh, state.v)
    v_old = p2_at_quad(mesh, inp.v_old)
    gv = p2_grad_at_quad(mesh, state.v)
    gv_old = p2_grad_at_quad(mesh, inp.v_old)
    grad_phi_old = np.einsum("eik,ei->ek", dlam, inp.phi_old[t])
    grad_p = np.einsum("eik,ei->ek", dlam, state.p[t])
    mu_q = p1_at_quad(mesh, state.mu)

    b = rho_k[..., None] * v_old + flux_J(mesh, inp.mu_old, params)[:, None, :]
    div_b = params.drho * np.einsum("ek,eqk->eq", grad_phi_old, v_old) + rho_k * np.einsum("eqkk->eq", gv_old)

    H = p2_hessians(dlam)  # (E, 6, 2, 2)
    hv = np.einsum("cea,eaij->ecij", state.v[:, p2_dofs(mesh)], H)  # (E, c, i, j)
    # sum_k d_k D_ck = (lap v_c + d_c div v) / 2
    div_D = 0.5 * (np.einsum("eckk->ec", hv) + np.einsum("ekkc->ec", hv))
    D = 0.5 * (gv + gv.transpose(0, 1, 3, 2))
    eta = params.viscosity(phi_old_q)
    grad_eta = params.d_viscosity_dphi(phi_old_q)[..., None] * grad_phi_old[:, None, :]
    div_etaD = np.einsum("eqck,eqk->eqc", D, grad_eta) + eta[..., None] * div_D[:, None, :]

    g = np.asarray(params.gravity)
    r1 = (
        0.5 * (rho_k + rho_km1)[..., None] * v
        - rho_km1[..., None] * v_old
        + tau * np.einsum("eqk,eqck->eqc", b, gv)
        + 0.5 * tau * div_b[..., None] * v
        - 2.0 * tau * div_etaD
        + tau * grad_p[:, None, :]
        - tau * mu_q[..., None] * grad_phi_old[:, None, :]
        - tau * rho_k[..., None] * g
        - tau * force_at_quad(mesh, force)
    )
    phi_q = p1_at_quad(mesh, state.phi)
    # constant mobility: div(m grad mu) vanishes elementwise for P1
    r2 = phi_q - phi_old_q + tau * np.einsum("eqk,ek->eq", v, grad_phi_old)
    r3 = params.sigma / params.eps * (f_plus_prime(phi_q, params.s) - phi_old_q) - mu_q
    return Residuals(r1, r2, r3)


# -- indicators ----------------------------------------------------------------------
def _vertex_gradients_p2(mesh: Mesh, v) -> np.ndarray:
    """Gradients of a P2 vector field at the three vertices of each triangle: (E, 3, c, k)."""
    G = p2_gradients(np.eye(3), barycentric_gradients(mesh))  # (E, 3, 6, 2)
    return np.einsum("cea,evak->evck", np.asarray(v)[:, p2_dofs(mesh)], G)


def _local_index(mesh: Mesh, tris, verts):
    return np.argmax(mesh.triangles[tris] == verts[:, None], axis=1)


def compute_indicators(state: State, params: MaterialParams, tau: float, force=None, residuals: Residuals | None = None) -> IndicatorField:
    """Element and edge indicators of the step that produced ``state``."""
    res = residuals or compute_residuals(state, params, tau, force)
    mesh = state.mesh
    q = quad_data(mesh)
    geo = mesh.geometry()
    inp = state.inputs

    eta_T = np.empty((3, mesh.n_triangles))
    eta_T[0] = geo.h_T * np.sqrt(np.einsum("eq,eqc,eqc->e", q.w, res.r1, res.r1))
    eta_T[1] = geo.h_T * np.sqrt(np.einsum("eq,eq,eq->e", q.w, res.r2, res.r2))
    eta_T[2] = geo.h_T * np.sqrt(np.einsum("eq,eq,eq->e", q.w, res.r3, res.r3))

    eta_E = np.zeros((3, mesh.n_edges))
    et = mesh.edge_tris
    inner = np.flatnonzero(et[:, 1] >= 0)
    if inner.size:
        lo, hi = et[inner, 0], et[inner, 1]
        nu = geo.normal[inner]
        hE = geo.h_E[inner]
        ev = mesh.edges[inner]
        dlam = barycentric_gradients(mesh)

        def p1_jump(values):
            g = np.einsum("eik,ei->ek", dlam, np.asarray(values)[mesh.triangles])
            return np.einsum("ek,ek->e", g[hi] - g[lo], nu)

        eta_E[1, inner] = params.b * hE * np.abs(p1_jump(state.mu))
        eta_E[2, inner] = hE * np.abs(p1_jump(state.phi))

        VG = _vertex_gradients_p2(mesh, state.v)
        jump_sq = np.zeros(inner.size)
        phi_old = inp.phi_old if inp is not None else state.phi
        for tq, wq in zip(_GAUSS_T, _GAUSS_W):
            side = []
            for tri in (lo, hi):
                i0 = _local_index(mesh, tri, ev[:, 0])
                i1 = _local_index(mesh, tri, ev[:, 1])
                side.append((1 - tq) * VG[tri, i0] + tq * VG[tri, i1])
            eta_e = params.viscosity((1 - tq) * phi_old[ev[:, 0]] + tq * phi_old[ev[:, 1]])
            jump = side[1] - side[0]
            jD = 0.5 * (jump + jump.transpose(0, 2, 1))
            vec = 2.0 * eta_e[:, None] * np.einsum("eck,ek->ec", jD, nu)
            jump_sq += wq * (vec**2).sum(axis=1)
        eta_E[0, inner] = hE * np.sqrt(jump_sq)  # h_E^(1/2) * (h_E * mean)^(1/2)
    return IndicatorField(eta_T, eta_E, tau, params.eta_min, params.b, params.sigma, params.eps)


def estimator_total(ind: IndicatorField) -> float:
    """Aggregate estimator eta_Omega (the square root of the weighted sum)."""
    return float(np.sqrt(ind.eta_omega_sq))


def combined_indicators(ind: IndicatorField, mesh: Mesh):
    """Per-triangle element indicator and per-triangle sum of its edge indicators."""
    eT = ind.weights_T @ ind.eta_T**2
    eE = ind.weights_E @ ind.eta_E**2
    eTE = eE[mesh.tri_edges].sum(axis=1)
    return eT, eTE


# -- marking -------------------------------------------------------------------------
def bulk_set(values, theta: float) -> np.ndarray:
    """Smallest set (greedy, descending) whose sum reaches ``theta`` times the total."""
    values = np.asarray(values, dtype=float)
    total = values.sum()
    if total <= 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-values, kind="stable")
    csum = np.cumsum(values[order])
    n = int(np.searchsorted(csum, theta * total * (1 - 1e-14), side="left")) + 1
    return np.sort(order[: min(n, values.size)])


def mark(
    ind: IndicatorField,
    mesh: Mesh,
    theta_r: float,
    theta_c: float,
    a_min: float,
    a_max: float,
):
    """Refine and coarsen candidate sets (sorted triangle indices).

    Size guards act directionally: a triangle is refined only if both children
    stay at or above ``a_min``, and coarsened only if the merged parent stays
    at or below ``a_max``.  Triangles selected for refinement are never
    coarsened.
    """
    for name, th in (("theta_r", theta_r), ("theta_c", theta_c)):
        if not 0 < th < 1:
            raise ValueError(f"{name} must lie in (0, 1)")
    eT, eTE = combined_indicators(ind, mesh)
    area = mesh.signed_area
    N = mesh.n_triangles
    R = np.union1d(bulk_set(eT, theta_r), bulk_set(eTE, theta_r))
    C = np.union1d(np.flatnonzero(eT <= theta_c / N * eT.sum()), np.flatnonzero(eTE <= theta_c / N * eTE.sum()))
    R = R[area[R] >= 2.0 * a_min]
    C = C[2.0 * area[C] <= a_max]
    C = np.setdiff1d(C, R)
    return R, C


# -- coarsening post-processing ---------------------------------------------------------
def complete_stars(mesh: Mesh, coarsen_set, stars=None) -> list[NodeStar]:
    """Stars whose triangles are all marked for coarsening."""
    stars = find_node_stars(mesh) if stars is None else stars
    marked = np.zeros(mesh.n_triangles, dtype=bool)
    marked[np.asarray(coarsen_set, dtype=np.int64)] = True
    return [s for s in stars if marked[list(s.triangles)].all()]


def _patch_gl(mesh: Mesh, phi, params: MaterialParams) -> np.ndarray:
    """Per-triangle Ginzburg-Landau energy (convex part with the vertex rule)."""
    t = mesh.triangles
    area = mesh.signed_area
    dlam = barycentric_gradients(mesh)
    g = np.einsum("eik,ei->ek", dlam, phi[t])
    grad = area * (g**2).sum(axis=1)
    fp = area / 3.0 * f_plus(phi[t], params.s).sum(axis=1)
    pt = phi[t]
    # exact integral of phi^2 over a linear triangle
    sq = area / 6.0 * ((pt**2).sum(axis=1) + pt[:, 0] * pt[:, 1] + pt[:, 1] * pt[:, 2] + pt[:, 0] * pt[:, 2])
    fm = 0.5 * (area - sq)
    return 0.5 * params.sigma * params.eps * grad + params.sigma / params.eps * (fp + fm)


@dataclass
class FilterResult:
    stars: list
    removed: int
    rounds: int
    gl_before: float
    gl_after: float


def postprocess_coarsen(mesh: Mesh, stars, phi, params: MaterialParams, tol: float = 1e-13, max_rounds: int = 20) -> FilterResult:
    """Keep only stars whose coarsening does not raise the Ginzburg-Landau energy.

    The coarse mesh is built and ``phi`` projected onto it; each star's patch
    energy before and after is compared.  Violating stars are removed and the
    check repeated until every patch and the whole domain pass.
    """
    phi = np.asarray(phi, dtype=float)
    stars = list(stars)
    gl_fine = _patch_gl(mesh, phi, params)
    gl_before = float(gl_fine.sum())
    removed = 0
    for rounds in range(1, max_rounds + 1):
        if not stars:
            return FilterResult([], removed, rounds, gl_before, gl_before)
        coarse, tmap = coarsen(mesh, stars)
        phi_c = transfer_p1(ScalarFieldP1(mesh, phi), coarse).values
        gl_coarse = _patch_gl(coarse, phi_c, params)
        keep = []
        for s in stars:
            members = list(s.triangles)
            parents = np.unique(tmap.containing[members])
            if gl_coarse[parents].sum() <= gl_fine[members].sum() + tol:
                keep.append(s)
        gl_after = float(gl_coarse.sum())
        if len(keep) == len(stars) and gl_after <= gl_before + tol:
            return FilterResult(stars, removed, rounds, gl_before, gl_after)
        if len(keep) == len(stars):
            # every patch passes but the global projection still gains energy: drop the worst star
            worst = max(
                stars,
                key=lambda s: gl_coarse[np.unique(tmap.containing[list(s.triangles)])].sum() - gl_fine[list(s.triangles)].sum(),
            )
            keep = [s for s in stars if s is not worst]
        removed += len(stars) - len(keep)
        stars = keep
    return FilterResult([], removed + len(stars), max_rounds, gl_before, gl_before)


# -- driver ------------------------------------------------------------------------------
@dataclass(frozen=True)
class AdaptParams:
    theta_r: float = 0.5
    theta_c: float = 0.01
    a_min: float = 8e-6
    a_max: float = 3e-4
    postprocess: bool = True


@dataclass
class AdaptRecord:
    n_refine_marked: int
    n_coarsen_marked: int
    n_stars: int
    n_stars_kept: int
    n_filtered: int
    n_tri: int
    area_min: float
    area_max: float
    gl_before: float
    gl_after: float
    eta_omega: float
    refined_area_min: float = math.inf  # smallest triangle selected for refinement
    merged_area_max: float = 0.0  # largest parent created by coarsening
    extra: dict = field(default_factory=dict)

    @property
    def assumption_ok(self) -> bool:
        return self.gl_after <= self.gl_before + 1e-12


def adapt_step(state: State, params: MaterialParams, tau: float, adapt: AdaptParams, force=None, indicators: IndicatorField | None = None):
    """Estimate, mark, coarsen (with the energy filter), refine and transfer.

    Returns ``(new_state, record)``; ``new_state`` is ``state`` moved to the
    new mesh.
    """
    mesh = state.mesh
    ind = indicators or compute_indicators(state, params, tau, force)
    R, C = mark(ind, mesh, adapt.theta_r, adapt.theta_c, adapt.a_min, adapt.a_max)
    stars = complete_stars(mesh, C)
    gl_before = ginzburg_landau(mesh, state.phi, params)
    n_stars = len(stars)
    n_filtered = 0
    if adapt.postprocess and stars:
        res = postprocess_coarsen(mesh, stars, state.phi, params)
        stars, n_filtered = res.stars, res.removed

    current = state
    keep_R = R
    merged_max = max((2.0 * mesh.signed_area[list(s.triangles)].max() for s in stars), default=0.0)
    if stars:
        coarse, tmap = coarsen(mesh, stars)
        current = transfer_state(state, coarse)
        in_star = np.zeros(mesh.n_triangles, dtype=bool)
        for s in stars:
            in_star[list(s.triangles)] = True
        keep_R = tmap.containing[R[~in_star[R]]]
    refined_min = float(current.mesh.signed_area[keep_R].min()) if keep_R.size else math.inf
    if keep_R.size:
        fine, _ = refine(current.mesh, keep_R)
        current = transfer_state(current, fine)
    gl_after = ginzburg_landau(current.mesh, current.phi, params)
    area = current.mesh.signed_area
    record = AdaptRecord(
        n_refine_marked=int(R.size),
        n_coarsen_marked=int(C.size),
        n_stars=n_stars,
        n_stars_kept=len(stars),
        n_filtered=n_filtered,
        n_tri=current.mesh.n_triangles,
        area_min=float(area.min()),
        area_max=float(area.max()),
        gl_before=gl_before,
        gl_after=gl_after,
        eta_omega=estimator_total(ind),
        refined_area_min=refined_min,
        merged_area_max=float(merged_max),
    )
    return current, record
