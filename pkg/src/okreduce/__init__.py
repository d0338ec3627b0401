"""Lyapunov–Schmidt reduction for the forced Ohta–Kawasaki energy near the Schwarz P surface in T³."""

__version__ = "0.1.0"

from .torus_field import ForcingSpec, PeriodicField, poisson_solve, nonlocal_energy  # noqa: F401
from .surface import SurfaceMesh, GeometryCache, build_schwarz_p, compute_geometry, enclosed_volume  # noqa: F401
from .reduction import BaseBundle, SolverConfig, solve_auxiliary  # noqa: F401
