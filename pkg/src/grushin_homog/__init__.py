"""Grushin / Ornstein-Uhlenbeck fast dynamics: invariant measure, cell problems,
effective Hamiltonians and singular-perturbation limits of HJB equations."""

__version__ = "0.1.0"

from .dynamics import DynamicsSpec, Jet2
from .grid import Field, Grid2D

__all__ = ["DynamicsSpec", "Jet2", "Grid2D", "Field", "__version__"]
