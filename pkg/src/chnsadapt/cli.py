"""Command line interface.

Precedence of settings: command-line flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULTS, ConfigError, RunConfig, config_from_text, load_config, parse_assignments, serialize


def _overrides(args) -> dict:
    pairs = list(args.set or [])
    for key in ("tau", "t_end", "output_dir", "nx", "ny"):
        val = getattr(args, key, None)
        if val is not None:
            pairs.append(f"{key}={val}")
    if getattr(args, "no_adapt", False):
        pairs.append("adapt=false")
    return parse_assignments(pairs, "<command line>")


def _config(args) -> RunConfig:
    over = _overrides(args)
    if getattr(args, "steps", None) is not None:
        tau = over.get("tau")
        if tau is None:
            tau = load_config(args.config).tau if args.config else DEFAULTS.tau
        over["t_end"] = args.steps * tau
    if args.config:
        return load_config(args.config, over)
    return RunConfig(**over)


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--tau", type=float)
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--steps", type=int, help="number of steps; sets t_end = steps * tau")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--no-adapt", action="store_true", help="keep the initial mesh fixed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chnsadapt", description="Adaptive Cahn-Hilliard/Navier-Stokes two-phase flow solver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a simulation")
    p.add_argument("config", nargs="?", help="key = value config file")
    p.add_argument("--restart", metavar="CHECKPOINT", help="continue from a checkpoint")
    _add_overrides(p)

    p = sub.add_parser("estimate", help="error indicators of a checkpointed level")
    p.add_argument("checkpoint")
    p.add_argument("--vtk", metavar="PATH", help="write fields with per-triangle indicators")

    p = sub.add_parser("validate-config", help="check a config file and print the resolved values")
    p.add_argument("config", nargs="?")
    _add_overrides(p)
    return parser


def cmd_run(args) -> int:
    from . import driver

    cfg = _config(args)
    if args.restart:
        result = driver.restart(cfg, args.restart)
    else:
        result = driver.run(cfg)
    if result.exit_code:
        print(f"error: {result.message}", file=sys.stderr)
    else:
        s = result.state
        print(f"finished step {s.k} at t={s.time:.6g} on {s.mesh.n_triangles} triangles; output in {cfg.output_dir}")
    return result.exit_code


def cmd_estimate(args) -> int:
    from . import io
    from .adapt import compute_indicators, estimator_total

    state, text, _ = io.load_checkpoint(args.checkpoint)
    cfg = config_from_text(text) if text else DEFAULTS
    if state.inputs is None:
        print("error: checkpoint holds the initial level; indicators need a computed step", file=sys.stderr)
        return 1
    ind = compute_indicators(state, cfg.material(), cfg.tau, cfg.wind())
    groups = ind.group_sums()
    print(f"step {state.k} time {state.time!r} triangles {state.mesh.n_triangles}")
    for name, val in zip(("T1", "E1", "T2", "E2", "T3", "E3"), groups):
        print(f"{name} {float(val)!r}")
    print(f"eta_omega {estimator_total(ind)!r}")
    if args.vtk:
        eT = np.sqrt(ind.weights_T @ ind.eta_T**2)
        io.write_fields(state, Path(args.vtk), cell_data={"eta_T": eT})
    return 0


def cmd_validate(args) -> int:
    cfg = _config(args)
    sys.stdout.write(serialize(cfg))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"run": cmd_run, "estimate": cmd_estimate, "validate-config": cmd_validate}
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
