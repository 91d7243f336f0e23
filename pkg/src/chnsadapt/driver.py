"""The simulation loop: solve, estimate, mark, adapt, write."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .adapt import AdaptParams, AdaptRecord, adapt_step, compute_indicators, estimator_total
from .config import RunConfig, serialize
from .fem import l2_project_function, n_p2
from .mesh import Mesh, build_rectangle_mesh, refine
from .physics import initial_phase
from .solver import (
    EnergyReport,
    SolverError,
    State,
    energy_report,
    init_step,
    initial_energy,
    initial_state,
    kinetic_energy,
    ginzburg_landau,
    time_step,
)

log = logging.getLogger("chnsadapt")

CHECKPOINT_NAME = "checkpoint.npz"
TIMESERIES_NAME = "timeseries.csv"


@dataclass
class RunResult:
    exit_code: int
    state: State
    rows: list[io.TimeSeriesRow] = field(default_factory=list)
    reports: list[EnergyReport] = field(default_factory=list)
    adapt_records: list[AdaptRecord] = field(default_factory=list)
    rejected_steps: list[int] = field(default_factory=list)
    e0: float = float("nan")
    mass0: float = float("nan")
    message: str = ""


def initial_phase_field(config: RunConfig, mesh: Mesh) -> np.ndarray:
    if config.initial == "constant":
        return np.full(mesh.n_vertices, float(config.initial_value))
    shape = config.interface()
    return l2_project_function(mesh, lambda x, y: initial_phase(np.stack([x, y], -1), config.eps, config.s, shape)).values


def initial_mesh(config: RunConfig) -> tuple[Mesh, np.ndarray]:
    """Criss-cross mesh, pre-refined towards the interface band if requested."""
    mesh = build_rectangle_mesh(config.width, config.height, config.nx, config.ny)
    phi0 = initial_phase_field(config, mesh)
    for _ in range(config.initial_adapt_cycles):
        band = np.abs(phi0[mesh.triangles]).min(axis=1) < 0.99
        marked = np.flatnonzero(band & (mesh.signed_area >= 2.0 * config.a_min))
        if marked.size == 0:
            break
        mesh, _ = refine(mesh, marked)
        phi0 = initial_phase_field(config, mesh)
    return mesh, phi0


def _row(state: State, params, report: EnergyReport | None, eta: float, slack: float | None = None) -> io.TimeSeriesRow:
    if report is None:
        e_kin = kinetic_energy(state.mesh, state.rho_prev, state.v)
        e_gl = ginzburg_landau(state.mesh, state.phi, params)
        return io.TimeSeriesRow(state.k, state.time, e_kin, e_gl, e_kin + e_gl, 0.0, 0.0, 0.0, math.nan, state.mass(), eta, state.mesh.n_triangles, state.ssn_iters)
    return io.TimeSeriesRow(
        state.k,
        state.time,
        report.e_kin,
        report.e_gl,
        report.e_total,
        report.d_visc,
        report.d_mob,
        report.work,
        report.slack if slack is None else slack,
        report.mass,
        eta,
        state.mesh.n_triangles,
        state.ssn_iters,
    )


class Simulation:
    """Drives one run; ``write=False`` keeps everything in memory."""

    def __init__(self, config: RunConfig, write: bool = True):
        self.config = config
        self.params = config.material()
        self.force = config.wind()
        self.bc = config.boundary()
        self.adapt = AdaptParams(config.theta_r, config.theta_c, config.a_min, config.a_max, config.postprocess)
        self.write = write
        self.out = Path(config.output_dir)
        self.config_text = serialize(config)

    # -- outputs ----------------------------------------------------------------------
    def _emit(self, result: RunResult, state: State, row: io.TimeSeriesRow, cell_data=None):
        result.rows.append(row)
        if not self.write:
            return
        io.write_timeseries_row(row, self.out / TIMESERIES_NAME)
        if state.k % self.config.output_interval == 0:
            io.write_fields(state, self.out / io.fields_filename(state.k), refined=self.config.vtk_refined, cell_data=cell_data)

    def _checkpoint(self, state: State, result: RunResult):
        if self.write:
            io.save_checkpoint(self.out / CHECKPOINT_NAME, state, self.config_text, {"e0": result.e0, "mass0": result.mass0})

    def _indicators(self, state: State, tau: float):
        ind = compute_indicators(state, self.params, tau, self.force)
        return ind, estimator_total(ind)

    # -- stepping --------------------------------------------------------------------
    def _advance(self, state: State, tau: float):
        c = self.config
        kw = dict(force=self.force, bc=self.bc, transport=c.transport, tol=c.ssn_tol, max_iter=c.ssn_max_iter)
        return time_step(state, self.params, tau, **kw)

    def _advance_with_retry(self, state: State, result: RunResult):
        """One step; on solver failure retry once as two half steps."""
        tau = self.config.tau
        try:
            return self._advance(state, tau), tau
        except SolverError as exc:
            log.warning("step %d rejected (%s); retrying with tau/2", state.k + 1, exc)
            result.rejected_steps.append(state.k + 1)
        half = self._advance(state, 0.5 * tau)
        half = self._advance(half, 0.5 * tau)
        # the two halves count as one accepted step
        return State(state.k + 1, state.time + tau, half.mesh, half.phi, half.mu, half.v, half.p, half.rho_prev, half.active, half.inputs, half.ssn_iters), 0.5 * tau

    # -- entry points -------------------------------------------------------------------
    def start(self) -> tuple[State, RunResult]:
        """Level 0 and the initial step; writes rows 0 and 1."""
        c = self.config
        if self.write:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / TIMESERIES_NAME).unlink(missing_ok=True)
        mesh, phi0 = initial_mesh(c)
        s0 = initial_state(mesh, phi0, self.params)
        result = RunResult(0, s0, e0=initial_energy(s0, self.params), mass0=s0.mass())
        self._emit(result, s0, _row(s0, self.params, None, math.nan))
        s1 = init_step(np.zeros((2, n_p2(mesh))), phi0, mesh, self.params, c.tau, self.force, self.bc, c.ssn_tol, c.ssn_max_iter)
        rep = energy_report(s1, self.params, c.tau, self.force)
        ind, eta = self._indicators(s1, c.tau)
        # the initial step has its own inequality; the slack column starts at step 2
        self._emit(result, s1, _row(s1, self.params, rep, eta, slack=math.nan))
        result.state = s1
        self._ind = ind
        return s1, result

    def resume(self, state: State, extra: dict) -> RunResult:
        if self.write:
            self.out.mkdir(parents=True, exist_ok=True)
            io.truncate_timeseries(self.out / TIMESERIES_NAME, state.k)
        self._ind = None
        return RunResult(0, state, e0=float(extra.get("e0", math.nan)), mass0=float(extra.get("mass0", math.nan)))

    def loop(self, state: State, result: RunResult, n_steps: int | None = None) -> RunResult:
        c = self.config
        last = c.n_steps if n_steps is None else n_steps
        while state.k < last:
            try:
                if c.adapt:
                    ind = self._ind if self._ind is not None else self._indicators(state, c.tau)[0]
                    state, rec = adapt_step(state, self.params, c.tau, self.adapt, self.force, indicators=ind)
                    result.adapt_records.append(rec)
                    if not rec.assumption_ok:
                        log.warning("step %d: adaptation raised the GL energy by %.3e", state.k, rec.gl_after - rec.gl_before)
                new, tau_used = self._advance_with_retry(state, result)
            except SolverError as exc:
                result.exit_code = 2
                result.message = f"aborted at step {state.k + 1}: {exc}"
                log.error(result.message)
                self._checkpoint(result.state, result)
                return result
            state = new
            rep = energy_report(state, self.params, tau_used, self.force)
            result.reports.append(rep)
            self._ind, eta = self._indicators(state, c.tau)
            cells = {"eta_T": np.sqrt(self._ind.weights_T @ self._ind.eta_T**2)}
            self._emit(result, state, _row(state, self.params, rep, eta), cells)
            result.state = state
            if state.k % c.checkpoint_interval == 0:
                self._checkpoint(state, result)
            if state.k % c.output_interval == 0:
                log.info("step %d t=%.4g E=%.6g slack=%.3e NT=%d ssn=%d", state.k, state.time, rep.e_total, rep.slack, state.mesh.n_triangles, state.ssn_iters)
        self._checkpoint(state, result)
        return result


def run(config: RunConfig, write: bool = True, n_steps: int | None = None) -> RunResult:
    """Full run from the initial condition."""
    sim = Simulation(config, write)
    try:
        state, result = sim.start()
    except SolverError as exc:
        log.error("initial step failed: %s", exc)
        mesh, phi0 = initial_mesh(config)
        return RunResult(2, initial_state(mesh, phi0, sim.params), message=str(exc))
    return sim.loop(state, result, n_steps)


def restart(config: RunConfig, checkpoint, write: bool = True, n_steps: int | None = None) -> RunResult:
    """Continue from a checkpoint written by :func:`run`."""
    state, _, extra = io.load_checkpoint(checkpoint)
    sim = Simulation(config, write)
    result = sim.resume(state, extra)
    return sim.loop(state, result, n_steps)
