"""Material laws, the relaxed double-obstacle energy, wind forcing and the
initial phase-field profile.

All functions are vectorised over ``phi`` / point arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MaterialParams:
    """Physical parameters; ``phi = -1`` is fluid 1, ``phi = +1`` fluid 2."""

    rho1: float = 0.01
    rho2: float = 1.0
    eta1: float = 1e-4
    eta2: float = 0.01
    sigma: float = 0.00032
    eps: float = 0.02
    s: float = 1e4
    mobility: float | None = None  # None -> eps / (500 sigma)
    gravity: tuple[float, float] = (0.0, -9.81)

    def __post_init__(self):
        if not (0 < self.rho1 <= self.rho2):
            raise ValueError("densities must satisfy 0 < rho1 <= rho2")
        for name in ("eta1", "eta2", "sigma", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.s > 1:
            raise ValueError("relaxation parameter s must exceed 1")
        if self.mobility is not None and not self.mobility > 0:
            raise ValueError("mobility must be positive")
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))

    @property
    def b(self) -> float:
        """Constant mobility."""
        return self.eps / (500.0 * self.sigma) if self.mobility is None else float(self.mobility)

    @property
    def eta_min(self) -> float:
        return min(self.eta1, self.eta2)

    @property
    def drho(self) -> float:
        """d rho / d phi."""
        return 0.5 * (self.rho2 - self.rho1)

    # -- material laws -----------------------------------------------------
    def density(self, phi):
        return 0.5 * ((self.rho2 - self.rho1) * np.asarray(phi) + (self.rho1 + self.rho2))

    def d_density_dphi(self) -> float:
        return self.drho

    def viscosity(self, phi):
        lo, hi = min(self.eta1, self.eta2), max(self.eta1, self.eta2)
        return np.clip(0.5 * ((self.eta2 - self.eta1) * np.asarray(phi) + (self.eta1 + self.eta2)), lo, hi)

    def d_viscosity_dphi(self, phi):
        phi = np.asarray(phi, dtype=float)
        return np.where(np.abs(phi) < 1.0, 0.5 * (self.eta2 - self.eta1), 0.0)

    def mobility_of(self, phi):
        return np.full(np.shape(phi), self.b)


# -- free energy ---------------------------------------------------------------
def obstacle_violation(phi):
    """lambda(phi) = max(0, phi - 1) + min(0, phi + 1)."""
    phi = np.asarray(phi, dtype=float)
    return np.maximum(0.0, phi - 1.0) + np.minimum(0.0, phi + 1.0)


def f_plus(phi, s):
    return 0.5 * s * obstacle_violation(phi) ** 2


def f_minus(phi):
    return 0.5 * (1.0 - np.asarray(phi, dtype=float) ** 2)


def free_energy(phi, s):
    return 0.5 * (1.0 - np.asarray(phi, dtype=float) ** 2 + s * obstacle_violation(phi) ** 2)


def f_plus_prime(phi, s):
    return s * obstacle_violation(phi)


def f_minus_prime(phi):
    return -np.asarray(phi, dtype=float)


def free_energy_prime(phi, s):
    return f_plus_prime(phi, s) + f_minus_prime(phi)


# -- forcing -------------------------------------------------------------------
@dataclass(frozen=True)
class WindForce:
    """Horizontal volume force ``(f1, 0)`` with compact elliptic support.

    ``f1 = amplitude * cos(pi r)^2`` for ``r = |(x - center) / half_axes| < 1``.
    With ``smooth=True`` the profile is ``cos(pi r / 2)^2``, which vanishes
    continuously at the support boundary.
    """

    center: tuple[float, float] = (1.0, 1.2)
    half_axes: tuple[float, float] = (1.0, 0.1)
    amplitude: float = 1.0
    smooth: bool = False

    def __post_init__(self):
        if min(self.half_axes) <= 0:
            raise ValueError("force half-axes must be positive")

    def radius(self, x, y):
        return np.hypot((np.asarray(x) - self.center[0]) / self.half_axes[0], (np.asarray(y) - self.center[1]) / self.half_axes[1])

    def __call__(self, x, y):
        r = self.radius(x, y)
        arg = 0.5 * np.pi * r if self.smooth else np.pi * r
        f1 = np.where(r < 1.0, self.amplitude * np.cos(arg) ** 2, 0.0)
        return f1, np.zeros_like(f1)


def wind_force(x, force: WindForce | None = None):
    """Force vector at a single point ``x`` (2,) or points (n, 2)."""
    force = force or WindForce()
    x = np.asarray(x, dtype=float)
    f1, f2 = force(x[..., 0], x[..., 1])
    return np.stack([f1, f2], axis=-1)


# -- initial profile ---------------------------------------------------------------
def initial_phase_profile(z, s):
    """First-order relaxed-obstacle profile as a function of scaled distance ``z``."""
    z = np.asarray(z, dtype=float)
    if not s > 1:
        raise ValueError("s must exceed 1")
    z0 = np.arctan(np.sqrt(s - 1.0))
    k = np.sqrt(s - 1.0)
    out = np.empty_like(z)
    mid = np.abs(z) <= z0
    up = z > z0
    lo = z < -z0
    out[mid] = np.sqrt(s / (s - 1.0)) * np.sin(z[mid])
    out[up] = (s - np.exp(k * (z0 - z[up]))) / (s - 1.0)
    out[lo] = -(s - np.exp(k * (z0 + z[lo]))) / (s - 1.0)
    return out


@dataclass(frozen=True)
class InterfaceShape:
    """Wavy interface ``x2 = height - amplitude sin(2 pi x1)``.

    The default puts fluid 2 (``phi = +1``, the heavy fluid) below the
    surface.  ``offset_profile=True`` uses ``z = (x2 - 0.02 sin(2 pi x1) + 0.2) / eps``
    instead (the other fields are then ignored).
    """

    height: float = 0.5
    amplitude: float = 0.02
    offset_profile: bool = False

    def scaled_distance(self, x, y, eps):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.offset_profile:
            return (y - 0.02 * np.sin(2 * np.pi * x) + 0.2) / eps
        return (self.height - self.amplitude * np.sin(2 * np.pi * x) - y) / eps


def initial_phase(x, eps, s, shape: InterfaceShape | None = None):
    """phi_0 at point(s) ``x`` (..., 2)."""
    shape = shape or InterfaceShape()
    x = np.asarray(x, dtype=float)
    return initial_phase_profile(shape.scaled_distance(x[..., 0], x[..., 1], eps), s)


@dataclass(frozen=True)
class Scenario:
    """Wind-over-wave setup on a rectangle."""

    params: MaterialParams = field(default_factory=MaterialParams)
    # the literal centre (1.0, 1.2) lies outside the unit-height domain
    force: WindForce | None = field(default_factory=lambda: WindForce(center=(1.0, 0.7)))
    interface: InterfaceShape = field(default_factory=InterfaceShape)
