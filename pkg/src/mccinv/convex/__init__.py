"""Dense LP and convex QP kernels: bounded primal simplex and primal active set."""

from .lp import LinearProgram, Status, SolveResult, solve_lp, check_farkas
from .qp import QuadraticProgram, solve_qp, kkt_residuals
from .dump import dump_model

__all__ = [
    "LinearProgram",
    "QuadraticProgram",
    "SolveResult",
    "Status",
    "check_farkas",
    "dump_model",
    "kkt_residuals",
    "solve_lp",
    "solve_qp",
]
