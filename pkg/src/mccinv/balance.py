"""Noise-adapted grid sizes and suboptimality bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .mesh import GridTriple

MAX_CELLS = 2**31


@dataclass(frozen=True)
class BalanceChoice:
    """Grid sizes for one noise level.

    ``h`` and ``tau`` are the raw mesh widths before rounding; the grids
    actually used have ``N_h`` and ``N_tau`` uniform cells.
    """

    delta: float
    s: float
    h: float
    N_h: int
    tau: float
    N_tau: int
    d: int = 1

    def triple(self, n_sim: int) -> GridTriple:
        return GridTriple.uniform(n_sim, self.N_tau, self.N_h)


def choose_grids(delta: float, s: float = 1.0) -> BalanceChoice:
    """Balanced ``h(delta)`` and ``tau(delta)`` for a one-dimensional problem.

    ``N_h = ceil(1 / h_raw)`` is evaluated on the floating-point power as is,
    so e.g. ``delta = 1e-5`` gives 101 cells rather than the exact 100.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must lie in (0, 1]")
    if not 0.0 < s <= 1.0:
        raise ValueError("s must lie in (0, 1]")
    h_raw = delta ** max(2.0 / (1.0 + 4.0 * s), 2.0 / (3.0 + 4.0 * s))
    n_h = math.ceil(1.0 / h_raw)
    tau_raw = min(h_raw, delta ** (1.0 / (4.0 * s * s)))
    if not tau_raw * MAX_CELLS >= 1.0:
        raise ValueError(f"delta={delta:g}, s={s:g} asks for more than {MAX_CELLS} cells")
    n_tau = math.ceil(1.0 / tau_raw)
    n_tau = n_h * math.ceil(n_tau / n_h)  # the h-grid must embed in the tau-grid
    return BalanceChoice(delta=delta, s=s, h=h_raw, N_h=n_h, tau=tau_raw, N_tau=n_tau)


class BoundViolation(ValueError):
    """A lower bound exceeded the objective by more than the tolerance."""


def suboptimality(objective: float, lower_bound: float, tol: float = 1e-9) -> float:
    """``objective - lower_bound``; a gap below ``-tol`` raises :class:`BoundViolation`."""
    eps = objective - lower_bound
    if eps < -tol:
        raise BoundViolation(f"lower bound {lower_bound:.6g} exceeds objective {objective:.6g}")
    return eps
