"""Output writers: legacy VTK fields, the CSV time series and checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .assembly import StepInputs
from .fem import n_p2
from .mesh import Mesh
from .solver import State

CSV_HEADER = "step,time,e_kin,e_gl,e_total,d_visc,d_mob,w_grav,slack,mass,eta_omega,n_tri,ssn_iters"
CHECKPOINT_FORMAT = "chnsadapt-checkpoint"
CHECKPOINT_VERSION = 1


# -- VTK ------------------------------------------------------------------------------
def _block(values, per_line: int = 6) -> str:
    vals = [repr(float(v)) for v in np.ravel(values)]
    return "\n".join(" ".join(vals[i : i + per_line]) for i in range(0, len(vals), per_line)) + "\n"


def write_fields(state: State, path, refined: bool = False, cell_data: dict | None = None) -> Path:
    """Legacy VTK (ASCII, v3.0) unstructured grid with phi, mu, p and v.

    By default points are the mesh vertices and the P2 velocity is sampled
    there.  ``refined=True`` adds the edge midpoints as points and splits each
    triangle into four, which shows the full P2 velocity.  ``cell_data`` maps
    names to per-triangle arrays; sub-triangles inherit their parent's value.
    """
    path = Path(path)
    mesh = state.mesh
    nv = mesh.n_vertices
    if refined:
        from .fem import p2_dofs, p2_node_coordinates

        pts = p2_node_coordinates(mesh)
        d = p2_dofs(mesh)
        # vertex i, then edge nodes 3 + i opposite vertex i
        cells = np.concatenate(
            [
                np.stack([d[:, 0], d[:, 5], d[:, 4]], 1),
                np.stack([d[:, 5], d[:, 1], d[:, 3]], 1),
                np.stack([d[:, 4], d[:, 3], d[:, 2]], 1),
                np.stack([d[:, 3], d[:, 4], d[:, 5]], 1),
            ]
        )
        e = mesh.edges

        def p1(a):
            return np.concatenate([a, 0.5 * (a[e[:, 0]] + a[e[:, 1]])])

        scalars = {"phi": p1(state.phi), "mu": p1(state.mu), "p": p1(state.p)}
        vel = state.v
        if cell_data:
            cell_data = {name: np.tile(np.asarray(arr), 4) for name, arr in cell_data.items()}
    else:
        pts = mesh.vertices
        cells = mesh.triangles
        scalars = {"phi": state.phi, "mu": state.mu, "p": state.p}
        vel = state.v[:, :nv]
    npts = len(pts)
    out = [
        "# vtk DataFile Version 3.0",
        f"chnsadapt step {state.k} time {state.time!r}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {npts} double",
    ]
    body = _block(np.column_stack([pts, np.zeros(npts)]), 3)
    text = "\n".join(out) + "\n" + body
    text += f"CELLS {len(cells)} {4 * len(cells)}\n"
    text += "".join(f"3 {a} {b} {c}\n" for a, b, c in cells)
    text += f"CELL_TYPES {len(cells)}\n" + "5\n" * len(cells)
    if cell_data:
        text += f"CELL_DATA {len(cells)}\n"
        for name, arr in cell_data.items():
            text += f"SCALARS {name} double 1\nLOOKUP_TABLE default\n" + _block(arr)
    text += f"POINT_DATA {npts}\n"
    for name, arr in scalars.items():
        text += f"SCALARS {name} double 1\nLOOKUP_TABLE default\n" + _block(arr)
    text += "VECTORS v double\n" + _block(np.column_stack([vel[0], vel[1], np.zeros(npts)]), 3)
    try:
        path.write_text(text, encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc
    return path


def fields_filename(step: int) -> str:
    return f"fields_{step:06d}.vtk"


# -- time series ----------------------------------------------------------------------------
@dataclass(frozen=True)
class TimeSeriesRow:
    step: int
    time: float
    e_kin: float
    e_gl: float
    e_total: float
    d_visc: float
    d_mob: float
    w_grav: float  # work of gravity plus the volume force
    slack: float
    mass: float
    eta_omega: float
    n_tri: int
    ssn_iters: int


assert ",".join(f.name for f in fields(TimeSeriesRow)) == CSV_HEADER


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_timeseries_row(row: TimeSeriesRow, path) -> None:
    """Append one row; the header is written when the file is new or empty."""
    path = Path(path)
    try:
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", encoding="utf-8", newline="") as fh:
            if new:
                fh.write(CSV_HEADER + "\n")
            fh.write(",".join(_fmt(v) for v in astuple(row)) + "\n")
    except OSError as exc:
        raise OSError(f"cannot append to time series {path}: {exc}") from exc


def read_timeseries(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]


def truncate_timeseries(path, last_step: int) -> None:
    """Drop rows after ``last_step`` (used when restarting)."""
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_step]
    path.write_text("".join(keep), encoding="utf-8")


# -- checkpoints ---------------------------------------------------------------------------
def save_checkpoint(path, state: State, config_text: str = "", extra: dict | None = None) -> Path:
    """Versioned ``.npz`` checkpoint holding the mesh, the level and its step inputs.

    Keys: ``format``, ``version``, ``config``, mesh arrays (``vertices``,
    ``triangles``, ``vertex_parents``, ``extent``), level arrays (``k``,
    ``time``, ``phi``, ``mu``, ``v``, ``p``, ``rho_prev``, ``active``,
    ``ssn_iters``), the optional ``in_*`` step inputs and ``extra_*`` scalars.
    """
    path = Path(path)
    m = state.mesh
    data = dict(
        format=np.array(CHECKPOINT_FORMAT),
        version=np.array(CHECKPOINT_VERSION),
        config=np.array(config_text),
        vertices=m.vertices,
        triangles=m.triangles,
        vertex_parents=m.vertex_parents,
        extent=np.asarray(m.extent, dtype=float),
        k=np.array(state.k),
        time=np.array(state.time),
        phi=state.phi,
        mu=state.mu,
        v=state.v,
        p=state.p,
        rho_prev=state.rho_prev,
        active=state.active,
        ssn_iters=np.array(state.ssn_iters),
    )
    if state.inputs is not None:
        i = state.inputs
        data.update(in_phi_old=i.phi_old, in_mu_old=i.mu_old, in_v_old=i.v_old, in_rho_prev=i.rho_prev)
    for key, val in (extra or {}).items():
        data[f"extra_{key}"] = np.asarray(val)
    tmp = path.with_name(path.name + ".tmp.npz")
    try:
        np.savez(tmp, **data)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    """Return ``(state, config_text, extra)``."""
    path = Path(path)
    try:
        z = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    with z:
        if str(z["format"]) != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a chnsadapt checkpoint")
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        mesh = Mesh(z["vertices"], z["triangles"], z["vertex_parents"], tuple(z["extent"]))
        inputs = None
        if "in_phi_old" in z:
            inputs = StepInputs(mesh, z["in_phi_old"], z["in_mu_old"], z["in_v_old"], z["in_rho_prev"])
        state = State(
            int(z["k"]),
            float(z["time"]),
            mesh,
            z["phi"],
            z["mu"],
            z["v"],
            z["p"],
            z["rho_prev"],
            z["active"].astype(np.int8),
            inputs,
            int(z["ssn_iters"]),
        )
        extra = {k[6:]: z[k][()] for k in z.files if k.startswith("extra_")}
        config = str(z["config"])
    if state.v.shape != (2, n_p2(mesh)):
        raise ValueError("checkpoint velocity does not match its mesh")
    return state, config, extra
