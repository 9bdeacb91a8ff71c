"""In-repo interior-point solver for horizon-structured NLPs."""

from .derivatives import DerivativeReport, check_derivatives
from .ipm import SolverOptions, evaluate_problem, kkt_residual, solve
from .nlp import (
    INFEASIBLE,
    MAX_ITER,
    SOLVED,
    TIMEOUT,
    HorizonNlp,
    Multipliers,
    NlpDimensionError,
    NonFiniteError,
    SolveResult,
)
