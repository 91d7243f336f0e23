"""Time stepping: initialization, the two-step scheme, semi-smooth Newton and
the discrete energy monitor."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    BoundarySpec,
    CoupledSystem,
    Layout,
    StepInputs,
    assemble_ch_init,
    assemble_momentum_init,
    assemble_step_system,
    flux_J,
    force_at_quad,
    p1_at_quad,
    p2_at_quad,
    p2_grad_at_quad,
    quad_data,
)
from .fem import (
    ScalarFieldP1,
    VectorFieldP2,
    assemble_mass_p1,
    assemble_stiffness_p1,
    integrate_p1,
    lumped_mass_p1,
    n_p2,
    transfer_p1,
    transfer_p2,
)
from .mesh import Mesh
from .physics import MaterialParams, f_plus

SSN_MAX_ITER = 30
SSN_TOL = 1e-10


class SolverError(RuntimeError):
    """Base class for step failures."""


class SSNError(SolverError):
    def __init__(self, msg, iterations):
        super().__init__(msg)
        self.iterations = iterations


class LinearSolveError(SolverError):
    pass


# -- state ------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class State:
    """One time level.

    ``rho_prev`` holds the nodal density of the previous level (needed by the
    momentum time derivative of the next step).  ``inputs`` records the
    transferred previous-level data the level was computed from; it is
    ``None`` for the initial level.
    """

    k: int
    time: float
    mesh: Mesh
    phi: np.ndarray
    mu: np.ndarray
    v: np.ndarray  # (2, NP2)
    p: np.ndarray
    rho_prev: np.ndarray
    active: np.ndarray | None = None
    inputs: StepInputs | None = None
    ssn_iters: int = 0

    def __post_init__(self):
        nv = self.mesh.n_vertices
        for name in ("phi", "mu", "p", "rho_prev"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (nv,):
                raise ValueError(f"{name} must have one value per vertex")
            object.__setattr__(self, name, arr)
        v = np.asarray(self.v, dtype=float)
        if v.shape != (2, n_p2(self.mesh)):
            raise ValueError("v must have shape (2, NV + NE)")
        object.__setattr__(self, "v", v)
        if self.active is None:
            object.__setattr__(self, "active", active_set(self.phi))

    def density(self, params: MaterialParams) -> np.ndarray:
        return params.density(self.phi)

    def flux(self, params: MaterialParams) -> np.ndarray:
        return flux_J(self.mesh, self.mu, params)

    @property
    def phi_field(self) -> ScalarFieldP1:
        return ScalarFieldP1(self.mesh, self.phi)

    @property
    def velocity(self) -> VectorFieldP2:
        return VectorFieldP2(self.mesh, self.v)

    def mass(self) -> float:
        return integrate_p1(self.mesh, self.phi)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (self.phi, self.mu, self.v, self.p))


def initial_state(mesh: Mesh, phi0, params: MaterialParams, v0=None) -> State:
    """Level 0: given phase field, chemical potential and pressure zero."""
    phi0 = np.asarray(phi0, dtype=float)
    v0 = np.zeros((2, n_p2(mesh))) if v0 is None else np.asarray(v0, dtype=float)
    zero = np.zeros(mesh.n_vertices)
    return State(0, 0.0, mesh, phi0, zero, v0, zero, params.density(phi0))


def active_set(phi) -> np.ndarray:
    phi = np.asarray(phi)
    return (phi > 1.0).astype(np.int8) - (phi < -1.0).astype(np.int8)


def transfer_state(state: State, target: Mesh) -> State:
    """Move a level onto a mesh one refine/coarsen step away.

    P1 fields (phi, mu, p, previous density) use the L2 projection, the
    velocity nodal interpolation.
    """
    if target is state.mesh:
        return state
    p1 = lambda a: transfer_p1(ScalarFieldP1(state.mesh, a), target).values  # noqa: E731
    p = p1(state.p)
    p = p - integrate_p1(target, p) / integrate_p1(target, np.ones(target.n_vertices))
    phi = p1(state.phi)
    return replace(
        state,
        mesh=target,
        phi=phi,
        mu=p1(state.mu),
        v=transfer_p2(state.velocity, target).values,
        p=p,
        rho_prev=p1(state.rho_prev),
        active=active_set(phi),
        inputs=None,
    )


# -- linear algebra -------------------------------------------------------------------
def _factor(A):
    try:
        return spla.splu(sp.csc_matrix(A))
    except RuntimeError as exc:  # singular factor
        raise LinearSolveError(str(exc)) from exc


def _lu_solve(A, b, layout: Layout | None = None, weights=None, refine_steps: int = 2):
    """Sparse LU solve with a few steps of iterative refinement.

    With a ``layout`` the pressure multiplier is eliminated before factoring:
    its dense row and column ruin the fill-reducing ordering.  The bordered
    system is then solved by pinning the first pressure value and shifting
    the pressure to zero mean (``weights`` are the lumped vertex weights).
    Both give the same solution because the velocity has no normal flux
    through the boundary, so the multiplier vanishes.
    """
    A = sp.csr_matrix(A)
    if layout is None:
        lu = _factor(A)
        solve = lu.solve
    else:
        n = A.shape[0]
        keep = np.ones(n, dtype=bool)
        keep[layout.lam] = False
        p0 = layout.p.start  # precedes the multiplier, so its index is unchanged
        Ar = A[keep][:, keep]
        mask = np.ones(n - 1)
        mask[p0] = 0.0
        Ar = sp.diags(mask) @ Ar + sp.csr_matrix(([1.0], ([p0], [p0])), shape=Ar.shape)
        lu = _factor(Ar)
        w = np.asarray(weights, dtype=float)

        def solve(r):
            rr = r[keep].copy()
            rr[p0] = 0.0
            y = lu.solve(rr)
            x = np.zeros(n)
            x[keep] = y
            p = x[layout.p]
            x[layout.p] = p - (w @ p) / w.sum()
            return x

    x = solve(b)
    for _ in range(refine_steps):
        x = x + solve(b - A @ x)
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("linear solve produced non-finite values")
    return x


def ssn_solve(system: CoupledSystem, x0=None, tol: float = SSN_TOL, max_iter: int = SSN_MAX_ITER, active0=None):
    """Primal active-set (semi-smooth Newton) iteration for the lumped ``F_+'``.

    Stops when the active set repeats or the nonlinear residual is at most
    ``tol * max(1, |rhs|)``.  Returns ``(x, iterations, active)``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if active0 is None:
        if x0 is None:
            active0 = np.zeros(system.lumped.size, dtype=np.int8)
        else:
            active0 = active_set(np.asarray(x0)[system.phi_slice])
    active = np.asarray(active0, dtype=np.int8)
    scale = tol * max(1.0, float(np.linalg.norm(system.rhs)))
    for it in range(1, max_iter + 1):
        A, b = system.linearized(active)
        x = _lu_solve(A, b, system.layout, system.weights)
        new = active_set(x[system.phi_slice])
        if np.array_equal(new, active):
            return x, it, new
        if np.linalg.norm(system.nonlinear_residual(x)) <= scale:
            return x, it, new
        active = new
    raise SSNError(f"semi-smooth Newton did not converge in {max_iter} iterations", max_iter)


# -- stepping --------------------------------------------------------------------------
def init_step(
    v0,
    phi0,
    mesh: Mesh,
    params: MaterialParams,
    tau: float,
    force=None,
    bc: BoundarySpec | None = None,
    tol: float = SSN_TOL,
    max_iter: int = SSN_MAX_ITER,
) -> State:
    """First step (k = 0 -> 1): Cahn-Hilliard with explicit transport, then momentum."""
    phi0 = np.asarray(phi0, dtype=float)
    v0 = np.zeros((2, n_p2(mesh))) if v0 is None else np.asarray(v0, dtype=float)
    ch = assemble_ch_init(mesh, phi0, v0, params, tau)
    x0 = np.concatenate([phi0, np.zeros(mesh.n_vertices)])
    x, iters, active = ssn_solve(ch, x0, tol=tol, max_iter=max_iter)
    phi1, mu1 = x[ch.phi_slice], x[ch.mu_slice]
    A, b, lay = assemble_momentum_init(mesh, v0, phi0, phi1, mu1, params, tau, force=force, bc=bc)
    y = _lu_solve(A, b, lay, lumped_mass_p1(mesh))
    v1 = y[lay.v].reshape(2, lay.np2)
    inputs = StepInputs(mesh, phi0, np.zeros(mesh.n_vertices), v0, params.density(phi0))
    return State(1, tau, mesh, phi1, mu1, v1, y[lay.p], params.density(phi0), active, inputs, iters)


def step_inputs(state: State, mesh_next: Mesh | None = None) -> StepInputs:
    s = state if mesh_next is None else transfer_state(state, mesh_next)
    return StepInputs(s.mesh, s.phi, s.mu, s.v, s.rho_prev)


def time_step(
    state: State,
    params: MaterialParams,
    tau: float,
    mesh_next: Mesh | None = None,
    force=None,
    bc: BoundarySpec | None = None,
    transport: str = "advective",
    tol: float = SSN_TOL,
    max_iter: int = SSN_MAX_ITER,
) -> State:
    """One step of the two-step scheme from level k (``state``) to k + 1.

    ``state.rho_prev`` supplies the level k-1 density.  When ``mesh_next``
    differs from ``state.mesh`` the level is transferred first.
    """
    if state.k < 1:
        raise ValueError("time_step needs a level k >= 1; use init_step first")
    if not state.is_finite():
        raise ValueError("state contains non-finite values")
    inputs = step_inputs(state, mesh_next)
    mesh = inputs.mesh
    system = assemble_step_system(inputs, params, tau, force=force, bc=bc, transport=transport)
    lay: Layout = system.layout
    x0 = np.zeros(lay.size)
    x0[lay.v] = inputs.v_old.ravel()
    x0[lay.phi] = inputs.phi_old
    x0[lay.mu] = inputs.mu_old
    x, iters, active = ssn_solve(system, x0, tol=tol, max_iter=max_iter)
    return State(
        state.k + 1,
        state.time + tau,
        mesh,
        x[lay.phi],
        x[lay.mu],
        x[lay.v].reshape(2, lay.np2),
        x[lay.p],
        params.density(inputs.phi_old),
        active,
        inputs,
        iters,
    )


# -- energy ------------------------------------------------------------------------------
def kinetic_energy(mesh: Mesh, rho_nodal, v) -> float:
    q = quad_data(mesh)
    vq = p2_at_quad(mesh, v)
    return 0.5 * float(np.einsum("eq,eq,eqc,eqc->", q.w, p1_at_quad(mesh, rho_nodal), vq, vq))


def ginzburg_landau(mesh: Mesh, phi, params: MaterialParams) -> float:
    """sigma eps / 2 |grad phi|^2 + sigma / eps F(phi).

    The convex part of F uses the vertex (lumped) rule, matching the
    discretisation of ``F_+'``; the concave part is integrated exactly.
    """
    phi = np.asarray(phi, dtype=float)
    grad = phi @ (assemble_stiffness_p1(mesh) @ phi)
    fp = lumped_mass_p1(mesh) @ f_plus(phi, params.s)
    fm = 0.5 * (mesh.signed_area.sum() - phi @ (assemble_mass_p1(mesh) @ phi))
    return 0.5 * params.sigma * params.eps * grad + params.sigma / params.eps * (fp + fm)


@dataclass(frozen=True)
class EnergyReport:
    """Terms of the discrete energy inequality for one step.

    ``slack`` is (right-hand side) - (left-hand side); the right-hand side
    contains the work of gravity and of the volume force.
    """

    k: int
    e_kin: float
    e_gl: float
    e_kin_old: float
    e_gl_old: float
    d_visc: float
    d_mob: float
    d_num_v: float
    d_num_phi: float
    w_grav: float
    w_force: float
    mass: float
    slack: float = field(init=False)

    def __post_init__(self):
        rhs = self.e_kin_old + self.e_gl_old + self.w_grav + self.w_force
        lhs = self.e_total + self.d_num_v + self.d_num_phi + self.d_visc + self.d_mob
        object.__setattr__(self, "slack", rhs - lhs)

    @property
    def e_total(self) -> float:
        return self.e_kin + self.e_gl

    @property
    def work(self) -> float:
        return self.w_grav + self.w_force


def energy_report(state: State, params: MaterialParams, tau: float, force=None) -> EnergyReport:
    """Evaluate every term of the energy inequality for the step that produced ``state``."""
    inp = state.inputs
    if inp is None:
        raise ValueError("state has no step inputs (initial level)")
    mesh = state.mesh
    q = quad_data(mesh)
    rho_k_q = params.density(p1_at_quad(mesh, inp.phi_old))
    vq = p2_at_quad(mesh, state.v)
    dv = state.v - inp.v_old
    gv = p2_grad_at_quad(mesh, state.v)
    sym = gv + gv.transpose(0, 1, 3, 2)
    eta_q = params.viscosity(p1_at_quad(mesh, inp.phi_old))
    d_visc = tau * 0.5 * float(np.einsum("eq,eq,eqck,eqck->", q.w, eta_q, sym, sym))
    K1 = assemble_stiffness_p1(mesh)
    d_mob = tau * params.b * float(state.mu @ (K1 @ state.mu))
    dphi = state.phi - inp.phi_old
    g = np.asarray(params.gravity)
    w_grav = tau * float(np.einsum("eq,eq,eqc,c->", q.w, rho_k_q, vq, g))
    w_force = tau * float(np.einsum("eq,eqc,eqc->", q.w, force_at_quad(mesh, force), vq)) if force is not None else 0.0
    return EnergyReport(
        k=state.k,
        e_kin=kinetic_energy(mesh, params.density(inp.phi_old), state.v),
        e_gl=ginzburg_landau(mesh, state.phi, params),
        e_kin_old=kinetic_energy(mesh, inp.rho_prev, inp.v_old),
        e_gl_old=ginzburg_landau(mesh, inp.phi_old, params),
        d_visc=d_visc,
        d_mob=d_mob,
        d_num_v=kinetic_energy(mesh, inp.rho_prev, dv),
        d_num_phi=0.5 * params.sigma * params.eps * float(dphi @ (K1 @ dphi)),
        w_grav=w_grav,
        w_force=w_force,
        mass=state.mass(),
    )


def initial_energy(state: State, params: MaterialParams) -> float:
    """Total energy of a level measured with its own previous density."""
    return kinetic_energy(state.mesh, state.rho_prev, state.v) + ginzburg_landau(state.mesh, state.phi, params)


def telescoped_check(reports: list[EnergyReport], literal_velocity_term: bool = False):
    """Both sides of the summed energy inequality over consecutive steps.

    ``reports`` are the reports of the steps k -> k+1, ..., l-1 -> l.  The
    velocity-increment dissipation carries the factor 1/2 of the per-step
    inequality; ``literal_velocity_term=True`` drops that factor.  Returns
    ``(lhs, rhs)`` where the inequality reads ``lhs >= rhs``.
    """
    if not reports:
        raise ValueError("need at least one step")
    first, last = reports[0], reports[-1]
    factor = 2.0 if literal_velocity_term else 1.0
    lhs = first.e_kin_old + first.e_gl_old + sum(r.work for r in reports)
    rhs = last.e_total + sum(factor * r.d_num_v + r.d_visc + r.d_mob + r.d_num_phi for r in reports)
    return lhs, rhs
