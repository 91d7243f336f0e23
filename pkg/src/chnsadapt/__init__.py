"""Adaptive two-phase flow: Cahn-Hilliard/Navier-Stokes with variable density
on bisection-refined triangle meshes."""

from .config import RunConfig, load_config
from .driver import run
from .mesh import Mesh, build_rectangle_mesh
from .physics import MaterialParams
from .solver import State

__all__ = ["Mesh", "MaterialParams", "RunConfig", "State", "build_rectangle_mesh", "load_config", "run"]
__version__ = "0.1.0"
