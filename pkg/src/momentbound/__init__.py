"""Outer bounds on moments of polynomial ODE state distributions.

The pipeline is: describe an :class:`~momentbound.problem.EstimationProblem`,
assemble a moment relaxation of order ``r``
(:func:`~momentbound.relaxation.build_relaxation`) and solve it for interval
bounds (:mod:`momentbound.engine`).
"""

__version__ = "0.1.0"

from .conic import SolverSettings, SolveReport, export_sdpa, solve
from .engine import (BoundResult, ConsistencyVerdict, bound_mass, bound_moment, check_consistency,
                     run_queries)
from .poly import Monomial, Polynomial, lie_derivative, parse_polynomial
from .problem import EstimationProblem, load_problem, save_problem, validate
from .relaxation import assemble, build_relaxation

__all__ = [
    "SolverSettings", "SolveReport", "export_sdpa", "solve", "BoundResult", "ConsistencyVerdict",
    "bound_mass", "bound_moment", "check_consistency", "run_queries", "Monomial", "Polynomial",
    "lie_derivative", "parse_polynomial", "EstimationProblem", "load_problem", "save_problem",
    "validate", "assemble", "build_relaxation",
]
