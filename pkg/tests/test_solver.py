import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from chnsadapt.assembly import StepInputs, assemble_ch_init, assemble_step_system
from chnsadapt.config import RunConfig
from chnsadapt.driver import initial_mesh
from chnsadapt.fem import integrate_p1, interpolate_p1, l2_project_function, lumped_mass_p1, n_p2
from chnsadapt.mesh import build_rectangle_mesh, refine, refine_uniform
from chnsadapt.physics import InterfaceShape, MaterialParams, initial_phase
from chnsadapt.solver import (
    State,
    _lu_solve,
    active_set,
    energy_report,
    ginzburg_landau,
    init_step,
    initial_state,
    kinetic_energy,
    ssn_solve,
    telescoped_check,
    time_step,
    transfer_state,
)

NO_GRAVITY = MaterialParams(gravity=(0.0, 0.0))


def _run(state, params, tau, n, **kw):
    out = [state]
    for _ in range(n):
        out.append(time_step(out[-1], params, tau, **kw))
    return out


def _wave(nx=24, ny=8, tau=1e-3):
    cfg = RunConfig(nx=nx, ny=ny, tau=tau)
    mesh, phi0 = initial_mesh(cfg)
    return cfg, mesh, phi0


# -- initial step ----------------------------------------------------------------------
def test_hydrostatic_single_phase():
    mesh = build_rectangle_mesh(3.0, 1.0, 12, 4)
    params = MaterialParams()
    phi0 = np.full(mesh.n_vertices, -1.0)
    s1 = init_step(None, phi0, mesh, params, 1e-3)
    np.testing.assert_allclose(s1.phi, -1.0, atol=1e-12)
    np.testing.assert_allclose(s1.v, 0.0, atol=1e-10)
    # grad p = rho g; zero mean
    y = mesh.vertices[:, 1]
    p = -9.81 * params.rho1 * y
    p -= integrate_p1(mesh, p) / 3.0
    np.testing.assert_allclose(s1.p, p, atol=1e-10)


def test_init_step_conserves_mass():
    cfg, mesh, phi0 = _wave()
    s1 = init_step(None, phi0, mesh, cfg.material(), cfg.tau, cfg.wind())
    assert abs(s1.mass() - integrate_p1(mesh, phi0)) <= 1e-12


def test_init_step_first_order_in_tau():
    # oracle: self-convergence, the increment phi^1 - phi^0 scales like tau
    mesh = refine_uniform(build_rectangle_mesh(1.0, 1.0, 4, 4), 1)
    params = MaterialParams(gravity=(0.0, 0.0))
    phi0 = l2_project_function(mesh, lambda x, y: 0.5 * np.cos(np.pi * x) * np.cos(np.pi * y)).values
    m = lumped_mass_p1(mesh)

    def incr(tau):
        s1 = init_step(None, phi0, mesh, params, tau)
        return np.sqrt(m @ (s1.phi - phi0) ** 2) / tau

    ratio = incr(1e-4) / incr(5e-5)
    assert ratio == pytest.approx(1.0, abs=0.3)


# -- time stepping ---------------------------------------------------------------------
def test_stationary_pure_phase_ten_steps():
    mesh = build_rectangle_mesh(1.0, 1.0, 4, 4)
    params = NO_GRAVITY
    s = init_step(None, np.ones(mesh.n_vertices), mesh, params, 1e-3)
    states = _run(s, params, 1e-3, 10)
    for st in states:
        np.testing.assert_allclose(st.phi, 1.0, atol=1e-10)
        np.testing.assert_allclose(st.v, 0.0, atol=1e-10)
        np.testing.assert_allclose(st.p, 0.0, atol=1e-10)
        np.testing.assert_allclose(st.mu, -params.sigma / params.eps, atol=1e-10)


def test_wind_scenario_energy_and_mass_fixed_mesh():
    cfg, mesh, phi0 = _wave()
    params, force = cfg.material(), cfg.wind()
    s0 = initial_state(mesh, phi0, params)
    s = init_step(None, phi0, mesh, params, cfg.tau, force)
    e0 = kinetic_energy(mesh, s0.rho_prev, s0.v) + ginzburg_landau(mesh, phi0, params)
    area = 3.0
    mass = s.mass()
    reports = []
    for _ in range(50):
        new = time_step(s, params, cfg.tau, force=force)
        rep = energy_report(new, params, cfg.tau, force)
        reports.append(rep)
        assert rep.slack >= -1e-10 * e0
        assert abs(new.mass() - s.mass()) <= 1e-12 * area
        s = new
    assert abs(s.mass() - mass) <= 1e-11 * area
    assert np.abs(s.v).max() > 0.0
    lhs, rhs = telescoped_check(reports)
    assert lhs - rhs == pytest.approx(sum(r.slack for r in reports), abs=1e-12 * e0)
    assert lhs - rhs >= -1e-9 * e0


def test_time_step_requires_initialized_level():
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    s0 = initial_state(mesh, np.ones(mesh.n_vertices), MaterialParams())
    with pytest.raises(ValueError):
        time_step(s0, MaterialParams(), 1e-3)


def test_time_step_rejects_non_finite_state():
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    params = NO_GRAVITY
    s1 = init_step(None, np.ones(mesh.n_vertices), mesh, params, 1e-3)
    bad = s1.phi.copy()
    bad[0] = np.inf
    broken = State(s1.k, s1.time, mesh, bad, s1.mu, s1.v, s1.p, s1.rho_prev)
    with pytest.raises(ValueError):
        time_step(broken, params, 1e-3)


def test_step_on_refined_mesh_transfers_state():
    cfg, mesh, phi0 = _wave(nx=12, ny=4)
    params = cfg.material()
    s1 = init_step(None, phi0, mesh, params, cfg.tau, cfg.wind())
    fine, _ = refine(mesh, np.arange(0, mesh.n_triangles, 3))
    s2 = time_step(s1, params, cfg.tau, mesh_next=fine, force=cfg.wind())
    assert s2.mesh is fine
    assert abs(s2.mass() - s1.mass()) <= 1e-12
    moved = transfer_state(s1, fine)
    assert abs(moved.mass() - s1.mass()) <= 1e-13
    assert moved.k == s1.k and moved.time == s1.time


def test_affine_in_gravity_and_force_with_frozen_active_set():
    cfg, mesh, phi0 = _wave(nx=12, ny=4)
    base = cfg.material()
    s1 = init_step(None, phi0, mesh, base, cfg.tau, cfg.wind())
    inputs = StepInputs(mesh, s1.phi, s1.mu, s1.v, s1.rho_prev)
    active = s1.active

    def solve(g, amp):
        params = MaterialParams(gravity=g)
        force = cfg.replace(force_amplitude=amp).wind() if amp else None
        system = assemble_step_system(inputs, params, cfg.tau, force=force)
        A, b = system.linearized(active)
        return _lu_solve(A, b, system.layout, system.weights)

    x0 = solve((0.0, 0.0), 0.0)
    xg = solve((0.0, -9.81), 0.0)
    xf = solve((0.0, 0.0), 1.0)
    xgf = solve((0.0, -9.81), 1.0)
    scale = np.abs(xgf).max()
    np.testing.assert_allclose(xgf - x0, (xg - x0) + (xf - x0), atol=1e-10 * scale)


def test_pinned_solve_matches_bordered_system():
    cfg, mesh, phi0 = _wave(nx=12, ny=4)
    params = cfg.material()
    s1 = init_step(None, phi0, mesh, params, cfg.tau, cfg.wind())
    system = assemble_step_system(StepInputs(mesh, s1.phi, s1.mu, s1.v, s1.rho_prev), params, cfg.tau, force=cfg.wind())
    A, b = system.linearized(s1.active)
    # oracle: the full bordered system including the multiplier row and column
    full = spla.spsolve(sp.csc_matrix(A), b)
    x = _lu_solve(A, b, system.layout, system.weights)
    keep = np.ones(b.size, dtype=bool)
    keep[system.layout.lam] = False
    np.testing.assert_allclose(x[keep], full[keep], atol=1e-9 * np.abs(full).max())
    assert abs(full[system.layout.lam]).max() <= 1e-9 * np.abs(full).max()


# -- semi-smooth Newton --------------------------------------------------------------------
def _ch_system(mesh, phi0, tau=1e-3):
    return assemble_ch_init(mesh, phi0, np.zeros((2, n_p2(mesh))), MaterialParams(), tau)


def test_ssn_converges_in_one_iteration_from_correct_active_set():
    cfg, mesh, phi0 = _wave(nx=12, ny=4)
    system = _ch_system(mesh, phi0)
    x0 = np.concatenate([phi0, np.zeros(mesh.n_vertices)])
    x, iters, active = ssn_solve(system, x0)
    assert iters >= 1 and np.any(active)
    y, iters2, active2 = ssn_solve(system, x0, active0=active)
    assert iters2 == 1
    np.testing.assert_array_equal(active2, active)
    np.testing.assert_allclose(y, x, atol=1e-12)
    assert np.linalg.norm(system.nonlinear_residual(y)) <= 1e-10 * max(1.0, np.linalg.norm(system.rhs))


def test_ssn_all_inactive_is_one_linear_solve():
    mesh = refine_uniform(build_rectangle_mesh(1.0, 1.0, 2, 2), 2)
    phi0 = interpolate_p1(mesh, lambda x, y: 0.3 * np.sin(2 * x) * np.cos(y)).values
    system = _ch_system(mesh, phi0)
    x, iters, active = ssn_solve(system, np.concatenate([phi0, np.zeros(mesh.n_vertices)]))
    assert iters == 1 and not np.any(active)
    np.testing.assert_array_equal(x, _lu_solve(system.matrix, system.rhs))


def test_ssn_rejects_bad_tolerance():
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    with pytest.raises(ValueError):
        ssn_solve(_ch_system(mesh, np.zeros(mesh.n_vertices)), tol=0.0)


def test_active_set_signs():
    np.testing.assert_array_equal(active_set(np.array([-1.5, -1.0, 0.0, 1.0, 1.2])), [-1, 0, 0, 0, 1])


# -- energy report ----------------------------------------------------------------------------
def test_energy_report_rest_state():
    mesh = build_rectangle_mesh(1.0, 1.0, 4, 4)
    params = MaterialParams()
    s1 = init_step(None, np.ones(mesh.n_vertices), mesh, params, 1e-3)
    s2 = time_step(s1, params, 1e-3)
    rep = energy_report(s2, params, 1e-3)
    assert abs(rep.e_kin) <= 1e-20 and abs(rep.d_visc) <= 1e-20 and abs(rep.w_grav) <= 1e-12
    assert rep.w_force == 0.0
    assert rep.slack == pytest.approx(0.0, abs=1e-12)


def test_energy_report_needs_step_inputs():
    mesh = build_rectangle_mesh(1.0, 1.0, 2, 2)
    with pytest.raises(ValueError):
        energy_report(initial_state(mesh, np.ones(mesh.n_vertices), MaterialParams()), MaterialParams(), 1e-3)


def _flat_interface(level):
    # strip of width 1/8 with a flat interface at y = 1/2 and equal densities
    params = MaterialParams(rho1=1.0, rho2=1.0, eta1=0.01, gravity=(0.0, 0.0))
    mesh = refine_uniform(build_rectangle_mesh(0.125, 1.0, 1, 8), level)
    shape = InterfaceShape(height=0.5, amplitude=0.0)
    phi0 = interpolate_p1(mesh, lambda x, y: initial_phase(np.stack([x, y], -1), params.eps, params.s, shape)).values
    return params, mesh, init_step(None, phi0, mesh, params, 1e-3)


def test_flat_profile_energy_matches_interface_energy():
    params, mesh, s = _flat_interface(8)
    # sigma * int_{-1}^{1} sqrt(2 F) = sigma pi / 2 per unit length
    expected = params.sigma * np.pi / 2 * 0.125
    assert ginzburg_landau(mesh, s.phi, params) == pytest.approx(expected, rel=0.01)


def test_flat_profile_energy_constant_once_relaxed():
    params, mesh, s = _flat_interface(4)
    states = _run(s, params, 1e-3, 22)
    energies = [ginzburg_landau(mesh, st.phi, params) for st in states[-3:]]
    assert energies[1] == pytest.approx(energies[0], rel=1e-8)
    assert energies[2] == pytest.approx(energies[1], rel=1e-8)
    assert energies[2] <= energies[0]


def test_telescoped_check_factor_and_errors():
    with pytest.raises(ValueError):
        telescoped_check([])
    cfg, mesh, phi0 = _wave(nx=12, ny=4)
    params, force = cfg.material(), cfg.wind()
    s1 = init_step(None, phi0, mesh, params, cfg.tau, force)
    reports = [energy_report(st, params, cfg.tau, force) for st in _run(s1, params, cfg.tau, 3, force=force)[1:]]
    lhs, rhs = telescoped_check(reports)
    lhs2, rhs2 = telescoped_check(reports, literal_velocity_term=True)
    assert lhs2 == lhs
    assert rhs2 - rhs == pytest.approx(sum(r.d_num_v for r in reports), rel=1e-12)
