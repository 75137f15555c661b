"""Finite-element experiments on Dirichlet eigenvalues of domains with a thin attached tube or a small Neumann window."""

from .errors import (AssemblyError, ConfigError, MeshError, PerturbationError, SolverError, SpecLabError,
                     TorsionError)

__version__ = "0.1.0"

__all__ = ["SpecLabError", "MeshError", "AssemblyError", "SolverError", "TorsionError", "PerturbationError",
           "ConfigError", "__version__"]
