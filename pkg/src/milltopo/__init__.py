"""Density-based topology optimization with multi-axis machining constraints."""

from .fea import FeaProblem, MaterialModel, SolverError, solve
from .filters import build_filter
from .grid import StructuredGrid, build_grid
from .machining import HeavisideParams, build_ray_sets, monotonicity_violation
from .optimizer import (
    OptimizationConfig,
    OptimizationError,
    OptimizationResult,
    Optimizer,
)

__version__ = "0.1.0"

__all__ = [
    "FeaProblem",
    "MaterialModel",
    "SolverError",
    "solve",
    "build_filter",
    "StructuredGrid",
    "build_grid",
    "HeavisideParams",
    "build_ray_sets",
    "monotonicity_violation",
    "OptimizationConfig",
    "OptimizationError",
    "OptimizationResult",
    "Optimizer",
    "__version__",
]
