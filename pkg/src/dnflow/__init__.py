"""Minimizing-movement solver and regularity diagnostics for
d/dt Dpsi(v) = div DF(Dv) with zero Dirichlet data."""

from .discretization import Grid, MatrixField, VectorField, divergence, gradient
from .potentials import (Integrand, Potential, check_convexity, integrand_preset, legendre,
                         potential_preset)
from .scheme import SchemeConfig, Trajectory, run_scheme, sine_mode, step_minimize

__version__ = "0.1.0"

__all__ = [
    "Grid", "VectorField", "MatrixField", "gradient", "divergence",
    "Potential", "Integrand", "check_convexity", "legendre",
    "potential_preset", "integrand_preset",
    "SchemeConfig", "Trajectory", "step_minimize", "run_scheme", "sine_mode",
]
