"""Run configuration: a flat ``key = value`` text format.

Lines are UTF-8, ``#`` starts a comment, blank lines are ignored.  Every key
has a default (listed in :data:`DEFAULTS`); unknown keys are an error.
Boundary keys ``bc_<side>`` take ``noslip`` or a tangential speed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .assembly import BoundarySpec
from .mesh import SIDES
from .physics import InterfaceShape, MaterialParams, WindForce


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # domain and initial mesh
    width: float = 3.0
    height: float = 1.0
    nx: int = 48
    ny: int = 16
    # time
    tau: float = 5e-4
    t_end: float = 10.0
    # material
    rho1: float = 0.01
    rho2: float = 1.0
    eta1: float = 1e-4
    eta2: float = 0.01
    sigma: float = 0.00032
    eps: float = 0.02
    s: float = 1e4
    mobility: float = 0.0  # 0 selects eps / (500 sigma)
    gravity_x: float = 0.0
    gravity_y: float = -9.81
    # forcing
    force: str = "wind"  # wind | none
    force_center_x: float = 1.0
    force_center_y: float = 0.7
    force_half_x: float = 1.0
    force_half_y: float = 0.1
    force_amplitude: float = 1.0
    force_smooth: bool = False
    # initial condition
    initial: str = "wave"  # wave | constant
    interface_height: float = 0.5
    interface_amplitude: float = 0.02
    offset_profile: bool = False
    initial_value: float = 1.0
    # velocity boundary data
    bc_bottom: str = "noslip"
    bc_right: str = "noslip"
    bc_top: str = "noslip"
    bc_left: str = "noslip"
    # adaptivity
    adapt: bool = True
    theta_r: float = 0.5
    theta_c: float = 0.01
    a_min: float = 8e-6
    a_max: float = 3e-4
    postprocess: bool = True
    initial_adapt_cycles: int = 0
    # solver
    ssn_tol: float = 1e-10
    ssn_max_iter: int = 30
    transport: str = "advective"  # advective | ibp
    # output
    output_dir: str = "output"
    output_interval: int = 10
    checkpoint_interval: int = 100
    vtk_refined: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------------
    def validate(self) -> None:
        def need(cond, key, what):
            if not cond:
                raise ConfigError(f"{key}: {what} (got {getattr(self, key)!r})")

        for key in ("width", "height", "tau", "t_end", "eta1", "eta2", "sigma", "eps", "force_half_x", "force_half_y", "a_min", "a_max", "ssn_tol"):
            need(getattr(self, key) > 0, key, "must be positive")
        for key in ("nx", "ny", "output_interval", "checkpoint_interval", "ssn_max_iter"):
            need(getattr(self, key) >= 1, key, "must be at least 1")
        need(self.initial_adapt_cycles >= 0, "initial_adapt_cycles", "must be non-negative")
        need(0 < self.rho1 <= self.rho2, "rho1", "need 0 < rho1 <= rho2")
        need(self.s > 1, "s", "must exceed 1")
        need(self.mobility >= 0, "mobility", "must be non-negative (0 selects the default law)")
        need(0 < self.theta_r < 1, "theta_r", "must lie in (0, 1)")
        need(0 < self.theta_c < 1, "theta_c", "must lie in (0, 1)")
        need(self.a_min < self.a_max, "a_min", "must be below a_max")
        need(self.force in ("wind", "none"), "force", "must be 'wind' or 'none'")
        need(self.initial in ("wave", "constant"), "initial", "must be 'wave' or 'constant'")
        need(self.transport in ("advective", "ibp"), "transport", "must be 'advective' or 'ibp'")
        for side in SIDES:
            key = f"bc_{side}"
            val = getattr(self, key)
            if val != "noslip":
                try:
                    float(val)
                except ValueError:
                    raise ConfigError(f"{key}: must be 'noslip' or a tangential speed (got {val!r})") from None

    # -- derived objects ------------------------------------------------------------
    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_end / self.tau)))

    def material(self) -> MaterialParams:
        return MaterialParams(
            rho1=self.rho1,
            rho2=self.rho2,
            eta1=self.eta1,
            eta2=self.eta2,
            sigma=self.sigma,
            eps=self.eps,
            s=self.s,
            mobility=self.mobility or None,
            gravity=(self.gravity_x, self.gravity_y),
        )

    def wind(self) -> WindForce | None:
        if self.force == "none":
            return None
        return WindForce(
            center=(self.force_center_x, self.force_center_y),
            half_axes=(self.force_half_x, self.force_half_y),
            amplitude=self.force_amplitude,
            smooth=self.force_smooth,
        )

    def interface(self) -> InterfaceShape:
        return InterfaceShape(self.interface_height, self.interface_amplitude, self.offset_profile)

    def boundary(self) -> BoundarySpec:
        tang = {side: float(getattr(self, f"bc_{side}")) for side in SIDES if getattr(self, f"bc_{side}") != "noslip"}
        return BoundarySpec(tang)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


DEFAULTS = RunConfig()
_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = type(getattr(DEFAULTS, key))
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_assignments(lines, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into typed values (no validation of ranges)."""
    out = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if not raw:
            raise ConfigError(f"{source}:{n}: missing value for {key!r}")
        try:
            out[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: {key}: {exc}") from None
    return out


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a config file; ``overrides`` (already typed or strings) take precedence."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    values = parse_assignments(text.splitlines(), str(path))
    values.update(overrides or {})
    return RunConfig(**values)


def config_from_text(text: str, overrides: dict | None = None) -> RunConfig:
    values = parse_assignments(text.splitlines())
    values.update(overrides or {})
    return RunConfig(**values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(RunConfig))
