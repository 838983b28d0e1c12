"""Box-constrained limited-memory quasi-Newton minimization.

Each iteration splits the variables into an active set (at a bound with the
gradient pushing outward) and a free set.  Active variables take a projected
steepest-descent step; free variables take an L-BFGS step computed from the
stored pairs restricted to the free set.  The trial point is clamped to the
box and a backtracking Armijo search on the projected path accepts it.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import fem
from .fem import NodalField, ProblemData
from .mesh import CellField, GridTriple

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoxQnConfig:
    """Optimizer settings; ``grad_tol=None`` means ``1e-10 * (1 + |f(x0)|)``."""

    memory: int = 10
    grad_tol: float | None = None
    max_iters: int = 500
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 50

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be at least 1")
        if not 0.0 < self.c1 < 1.0:
            raise ValueError("sufficient-decrease constant must lie in (0, 1)")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.max_iters < 0 or (self.grad_tol is not None and self.grad_tol < 0):
            raise ValueError("negative iteration cap or tolerance")


@dataclass
class BoxQnResult:
    x: np.ndarray
    f: float
    iterations: int
    status: str  # converged | max_iters | line_search | oracle_error
    proj_grad: float
    evaluations: int
    history: list[float]


def projected_gradient(x, g, lo, up) -> np.ndarray:
    return x - np.clip(x - g, lo, up)


def _two_loop(g, pairs, free):
    """Apply the L-BFGS inverse Hessian (pairs restricted to ``free``) to ``g``."""
    q = g[free].copy()
    used = []
    for s, y in reversed(pairs):
        sf, yf = s[free], y[free]
        sy = sf @ yf
        if sy <= 1e-12 * np.linalg.norm(sf) * np.linalg.norm(yf):
            continue
        a = (sf @ q) / sy
        q -= a * yf
        used.append((sf, yf, sy, a))
    if used:
        sf, yf, sy, _ = used[0]
        q *= sy / (yf @ yf)
    for sf, yf, sy, a in reversed(used):
        b = (yf @ q) / sy
        q += (a - b) * sf
    return q, bool(used)


def minimize_box(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    lo,
    up,
    x0,
    cfg: BoxQnConfig = BoxQnConfig(),
) -> BoxQnResult:
    """Minimize ``fun`` (returning value and gradient) over ``lo <= x <= up``."""
    lo = np.asarray(lo, dtype=float)
    up = np.asarray(up, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float).copy(), lo, up)
    try:
        f, g = fun(x)
    except Exception as exc:  # the oracle is user code
        log.error("objective failed at the start point: %s", exc)
        return BoxQnResult(x, np.nan, 0, "oracle_error", np.inf, 1, [])
    g = np.asarray(g, dtype=float)
    gtol = 1e-10 * (1.0 + abs(f)) if cfg.grad_tol is None else cfg.grad_tol
    pairs: deque = deque(maxlen=cfg.memory)
    history = [f]
    evals = 1

    for it in range(cfg.max_iters + 1):
        pg = projected_gradient(x, g, lo, up)
        pgn = float(np.abs(pg).max(initial=0.0))
        if pgn <= gtol:
            return BoxQnResult(x, f, it, "converged", pgn, evals, history)
        if it == cfg.max_iters:
            break

        # gradient-projection identification of the active set
        eps = min(pgn, 1e-8 * (1.0 + np.abs(x).max(initial=0.0)))
        active = ((x <= lo + eps) & (g > 0)) | ((x >= up - eps) & (g < 0))
        free = ~active
        d = np.zeros_like(x)
        d[active] = -g[active]
        hg, curved = _two_loop(g, pairs, free)
        d[free] = -hg
        if not curved:
            # no curvature information: scale steepest descent to a unit move
            d /= max(1.0, float(np.abs(d).max(initial=0.0)))
        if g[free] @ d[free] >= 0.0:
            pairs.clear()
            d = -g / max(1.0, float(np.abs(g).max()))

        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_backtracks):
            xt = np.clip(x + alpha * d, lo, up)
            step = xt - x
            decrease = g @ step
            if decrease >= 0.0 and np.abs(step).max(initial=0.0) > 0.0:
                alpha *= cfg.backtrack
                continue
            try:
                ft, gt = fun(xt)
            except Exception as exc:
                log.error("objective failed during line search: %s", exc)
                return BoxQnResult(x, f, it, "oracle_error", pgn, evals, history)
            evals += 1
            if ft <= f + cfg.c1 * decrease:
                accepted = True
                break
            alpha *= cfg.backtrack
        if not accepted:
            if pairs:
                pairs.clear()
                continue
            return BoxQnResult(x, f, it, "line_search", pgn, evals, history)

        gt = np.asarray(gt, dtype=float)
        s, y = xt - x, gt - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y))
        x, f, g = xt, ft, gt
        history.append(f)
        if not np.abs(s).max(initial=0.0) > 0.0:
            break

    pgn = float(np.abs(projected_gradient(x, g, lo, up)).max(initial=0.0))
    status = "converged" if pgn <= gtol else "max_iters"
    return BoxQnResult(x, f, min(it, cfg.max_iters), status, pgn, evals, history)


@dataclass(frozen=True)
class Reconstruction:
    w: CellField
    u: NodalField
    misfit: float  # unsquared L2 distance to the data
    objective: float  # 0.5 * misfit^2
    result: BoxQnResult


def reconstruct(
    pd: ProblemData,
    triple: GridTriple,
    y: NodalField,
    w0: CellField,
    cfg: BoxQnConfig = BoxQnConfig(),
) -> Reconstruction:
    """Local minimization of ``0.5 ||u(w) - y||^2`` over piecewise constants on the h-grid."""
    if w0.grid != triple.h:
        raise ValueError("initial coefficient must live on the h-grid")
    if y.grid != triple.sim:
        raise ValueError("data must live on the simulation grid")
    h, sim = triple.h, triple.sim

    def oracle(w):
        J, grad, _ = fem.objective_and_gradient(pd, CellField(h, w), y, sim)
        return J, grad

    n = h.n_cells
    res = minimize_box(oracle, np.full(n, pd.w_lo), np.full(n, pd.w_hi), w0.values, cfg)
    w = CellField(h, res.x)
    u = fem.solve_state(pd, w, sim)
    m = fem.misfit(u, y)
    return Reconstruction(w, u, m, 0.5 * m * m, res)
