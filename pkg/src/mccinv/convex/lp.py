"""Bounded-variable primal simplex on a dense tableau.

Problems are stated as::

    min c.x  s.t.  A_eq x = b_eq,  A_in x <= b_in,  lo <= x <= up

Inequalities receive nonnegative slacks.  Phase 1 starts from a crash basis
(slacks where the row is satisfied at the starting bounds, signed artificial
columns elsewhere) and minimizes the sum of artificials.  Pricing is Dantzig's
rule; after ``stall`` consecutive degenerate pivots the solver falls back to
Bland's rule until the objective moves again.  The tableau is recomputed from
a fresh factorization of the basis every ``refactor`` pivots.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg.blas import dger

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


def _block(a, n, name):
    if a is None:
        return np.zeros((0, n))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[1] != n:
        raise ValueError(f"{name} has {a.shape[1]} columns, expected {n}")
    return a


def _vec(b, m, name):
    if b is None:
        b = np.zeros(0)
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.size != m:
        raise ValueError(f"{name} has length {b.size}, expected {m}")
    return b


@dataclass
class LinearProgram:
    """Dense LP data.  Variable bounds default to ``0 <= x < inf``."""

    c: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lo: np.ndarray | None = None
    up: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A_eq = _block(self.A_eq, n, "A_eq")
        self.b_eq = _vec(self.b_eq, self.A_eq.shape[0], "b_eq")
        self.A_in = _block(self.A_in, n, "A_in")
        self.b_in = _vec(self.b_in, self.A_in.shape[0], "b_in")
        self.lo = np.zeros(n) if self.lo is None else _vec(self.lo, n, "lo").copy()
        self.up = np.full(n, np.inf) if self.up is None else _vec(self.up, n, "up").copy()
        if np.any(self.lo > self.up):
            raise ValueError("variable bounds with lo > up")
        if np.any(np.isnan(self.lo)) or np.any(np.isnan(self.up)):
            raise ValueError("NaN variable bound")
        for name in ("c", "A_eq", "b_eq", "A_in", "b_in"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def m_in(self) -> int:
        return self.A_in.shape[0]

    def standard_form(self):
        """``(A, b, lo, up)`` with slack columns appended for the inequality rows."""
        n, me, mi = self.n, self.m_eq, self.m_in
        A = np.zeros((me + mi, n + mi))
        A[:me, :n] = self.A_eq
        A[me:, :n] = self.A_in
        A[me:, n:] = np.eye(mi)
        b = np.concatenate([self.b_eq, self.b_in])
        lo = np.concatenate([self.lo, np.zeros(mi)])
        up = np.concatenate([self.up, np.full(mi, np.inf)])
        return A, b, lo, up


@dataclass
class SolveResult:
    """Outcome of an LP or QP solve.

    ``certificate`` holds the Farkas row multipliers for an infeasible
    problem and a recession direction for an unbounded one.  ``nonbasic``
    records, per structural variable, -1/+1 when it sits nonbasic at its
    lower/upper bound and 0 otherwise; ``active_rows`` flags inequality
    rows whose slack is nonbasic.
    """

    status: Status
    x: np.ndarray | None = None
    objective: float = np.nan
    y_eq: np.ndarray | None = None
    y_in: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    certificate: np.ndarray | None = None
    iterations: int = 0
    message: str = ""
    nonbasic: np.ndarray | None = field(default=None, repr=False)
    active_rows: np.ndarray | None = field(default=None, repr=False)
    redundant_eq: np.ndarray | None = field(default=None, repr=False)
    basis: tuple | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def _rank1_update(T: np.ndarray, col: np.ndarray, row: np.ndarray) -> np.ndarray:
    """``T - col row'`` in place for Fortran-ordered ``T``."""
    if T.size == 0:
        return T
    return dger(-1.0, col, row, a=T, overwrite_a=True)


class _Tableau:
    """Working state of the bounded primal simplex.

    Only the nonbasic columns of ``B^-1 A`` are stored (``TN``, one column per
    entry of ``nb``); a pivot swaps the entering column for the leaving one.
    """

    def __init__(self, A, b, lo, up, feas_tol, opt_tol, piv_tol, refactor, stall, warm=None):
        self.A, self.b, self.lo, self.up = A, b, lo, up
        self.m, self.nt = A.shape
        scale = max(1.0, float(np.abs(b).max(initial=0.0)))
        self.feas_tol = feas_tol * scale
        self.opt_tol = opt_tol
        self.piv_tol = piv_tol
        self.refactor_every = refactor
        self.stall_limit = stall
        self.pivots = 0
        self.phase = 1
        self.sigma = np.ones(self.m)
        if warm is None or not self._warm(warm):
            self._crash()

    def _crash(self):
        lo, up, A, b = self.lo, self.up, self.A, self.b
        # start nonbasic at the finite bound closest to zero, free at 0
        x = np.where(np.isfinite(lo), lo, np.where(np.isfinite(up), up, 0.0))
        both = np.isfinite(lo) & np.isfinite(up)
        x = np.where(both & (np.abs(up) < np.abs(lo)), up, x)
        self.x = x.astype(float)
        self.is_basic = np.zeros(self.nt, dtype=bool)
        r = b - A @ self.x
        self.head = np.empty(self.m, dtype=int)
        self.sigma = np.where(r >= 0.0, 1.0, -1.0)
        # slack crash: a unit column with a nonnegative residual can be basic
        unit_cols = self._unit_columns()
        for i in range(self.m):
            j = unit_cols.get(i)
            if j is not None and self.x[j] == lo[j] and lo[j] <= r[i] + self.x[j] <= up[j]:
                self.head[i] = j
                self.is_basic[j] = True
            else:
                self.head[i] = self.nt + i
        self.nb = np.flatnonzero(~self.is_basic)
        self.refactor(cost=None)

    def _warm(self, warm) -> bool:
        """Adopt a previous basis if it is nonsingular and primal feasible here."""
        head, at_upper = warm
        head = np.asarray(head, dtype=int)
        if head.size != self.m or np.any(head >= self.nt) or np.unique(head).size != self.m:
            return False
        self.head = head.copy()
        self.is_basic = np.zeros(self.nt, dtype=bool)
        self.is_basic[head] = True
        use_up = np.asarray(at_upper, dtype=bool) & np.isfinite(self.up)
        x = np.where(np.isfinite(self.lo), self.lo, np.where(np.isfinite(self.up), self.up, 0.0))
        self.x = np.where(use_up, self.up, x).astype(float)
        self.nb = np.flatnonzero(~self.is_basic)
        self.phase = 2
        try:
            self.refactor(cost=None, clip=False)
        except np.linalg.LinAlgError:
            self.phase = 1
            return False
        lo, up = self.basic_bounds()
        if np.any(self.xB < lo - self.feas_tol) or np.any(self.xB > up + self.feas_tol):
            self.phase = 1
            return False
        self.xB = np.clip(self.xB, lo, up)
        return True

    def _unit_columns(self):
        out = {}
        nz = self.A != 0.0
        counts = nz.sum(0)
        for j in np.flatnonzero(counts == 1):
            i = int(np.flatnonzero(nz[:, j])[0])
            if self.A[i, j] == 1.0 and i not in out:
                out[i] = int(j)
        return out

    # -- basis algebra ---------------------------------------------------

    def basis_matrix(self) -> np.ndarray:
        B = np.zeros((self.m, self.m))
        real = self.head < self.nt
        B[:, real] = self.A[:, self.head[real]]
        rows = np.flatnonzero(~real)
        art = self.head[rows] - self.nt
        B[art, rows] = self.sigma[art]
        return B

    def basic_bounds(self):
        lo = np.zeros(self.m)
        up = np.full(self.m, np.inf if self.phase == 1 else 0.0)
        real = self.head < self.nt
        lo[real] = self.lo[self.head[real]]
        up[real] = self.up[self.head[real]]
        return lo, up

    def phase_cost_basic(self, cost):
        cb = np.zeros(self.m)
        real = self.head < self.nt
        if cost is None:
            cb[~real] = 1.0
        else:
            cb[real] = cost[self.head[real]]
        return cb

    def refactor(self, cost, clip: bool = True):
        AN = self.A[:, self.nb]
        rhs = self.b - AN @ self.x[self.nb]
        if self.m == 0:
            self.TN = np.zeros((0, self.nb.size), order="F")
            self.xB = np.zeros(0)
            self.y = np.zeros(0)
            self.dN = (np.zeros(self.nt) if cost is None else cost)[self.nb].copy()
            return
        lu = sla.lu_factor(self.basis_matrix(), check_finite=False)
        if np.any(np.abs(np.diag(lu[0])) <= 1e-14 * max(1.0, np.abs(lu[0]).max())):
            raise np.linalg.LinAlgError("singular basis")
        sol = sla.lu_solve(lu, np.column_stack([AN, rhs]), check_finite=False)
        self.TN = np.asfortranarray(sol[:, :-1])
        self.xB = sol[:, -1]
        if clip:
            lo, up = self.basic_bounds()
            self.xB = np.clip(self.xB, lo, up) if self.phase == 2 else np.maximum(self.xB, lo)
        cvec = np.zeros(self.nt) if cost is None else cost
        self.y = sla.lu_solve(lu, self.phase_cost_basic(cost), trans=1, check_finite=False)
        self.dN = cvec[self.nb] - self.y @ AN

    @property
    def d(self) -> np.ndarray:
        d = np.zeros(self.nt)
        d[self.nb] = self.dN
        return d

    def values(self) -> np.ndarray:
        x = self.x.copy()
        real = self.head < self.nt
        x[self.head[real]] = self.xB[real]
        return x

    def basis(self):
        return self.head.copy(), (~self.is_basic) & (self.x == self.up) & (self.lo != self.up)

    # -- iterations --------------------------------------------------------

    def price(self, bland: bool, dual_tol: float):
        xn = self.x[self.nb]
        d = self.dN
        inc = (xn < self.up[self.nb]) & (d < -dual_tol)
        dec = (xn > self.lo[self.nb]) & (d > dual_tol)
        if bland:
            cand = np.flatnonzero(inc | dec)
            if cand.size == 0:
                return None, 0
            k = int(cand[np.argmin(self.nb[cand])])
        else:
            score = np.where(inc | dec, np.abs(d), 0.0)
            k = int(np.argmax(score)) if score.size else 0
            if score.size == 0 or score[k] == 0.0:
                return None, 0
        return k, (1 if inc[k] else -1)

    def ratio(self, k: int, direction: int, bland: bool):
        q = self.nb[k]
        dlt = direction * self.TN[:, k]
        lo, up = self.basic_bounds()
        xB = self.xB
        with np.errstate(divide="ignore", invalid="ignore"):
            pos = (dlt > self.piv_tol) & np.isfinite(lo)
            neg = (dlt < -self.piv_tol) & np.isfinite(up)
            ratio = np.full(self.m, np.inf)
            ratio[pos] = (xB[pos] - lo[pos]) / dlt[pos]
            ratio[neg] = (up[neg] - xB[neg]) / (-dlt[neg])
            relaxed = np.full(self.m, np.inf)
            relaxed[pos] = (xB[pos] - lo[pos] + self.feas_tol) / dlt[pos]
            relaxed[neg] = (up[neg] - xB[neg] + self.feas_tol) / (-dlt[neg])
        span = self.up[q] - self.lo[q]
        if not np.isfinite(relaxed).any():
            return (None, span, dlt) if np.isfinite(span) else (None, np.inf, dlt)
        if bland:
            tmin = ratio.min()
            ties = np.flatnonzero(ratio <= tmin + 1e-12 * max(1.0, abs(tmin)))
            p = int(ties[np.argmin(self.head[ties])])
        else:
            tmax = relaxed.min()
            cand = np.flatnonzero(ratio <= tmax)
            p = int(cand[np.argmax(np.abs(dlt[cand]))])
        theta = max(ratio[p], 0.0)
        if np.isfinite(span) and span <= theta:
            return None, span, dlt
        return p, theta, dlt

    def pivot(self, p: int, k: int, direction: int, theta: float, dlt: np.ndarray):
        q = self.nb[k]
        entering_value = self.x[q] + direction * theta
        self.xB -= theta * dlt
        leaving = self.head[p]
        col = self.TN[:, k].copy()
        piv = col[p]
        prow = self.TN[p] / piv
        col[p] = 0.0
        self.TN = _rank1_update(self.TN, col, prow)
        self.TN[p] = prow
        dq = self.dN[k]
        self.dN -= dq * prow
        if leaving < self.nt:
            self.x[leaving] = self.lo[leaving] if dlt[p] > 0 else self.up[leaving]
            self.is_basic[leaving] = False
            newcol = -col / piv
            newcol[p] = 1.0 / piv
            self.TN[:, k] = newcol
            self.dN[k] = -dq / piv
            self.nb[k] = leaving
        else:
            # artificial columns never re-enter
            keep = np.arange(self.nb.size) != k
            self.TN = np.asfortranarray(self.TN[:, keep])
            self.dN = self.dN[keep]
            self.nb = self.nb[keep]
        self.head[p] = q
        self.is_basic[q] = True
        self.xB[p] = entering_value
        self.x[q] = entering_value
        self.pivots += 1

    def flip(self, k: int, direction: int, span: float, dlt: np.ndarray):
        q = self.nb[k]
        self.xB -= span * dlt
        self.x[q] = self.up[q] if direction > 0 else self.lo[q]

    def run(self, cost, max_iter: int):
        """Iterate until optimal for the current phase cost.  Returns a status string."""
        dual_tol = self.opt_tol * (1.0 if cost is None else max(1.0, float(np.abs(cost).max(initial=0.0))))
        bland = False
        degenerate = 0
        since_refactor = 0
        while True:
            if self.pivots >= max_iter:
                return "limit"
            k, direction = self.price(bland, dual_tol)
            if k is None:
                # confirm optimality on a fresh factorization
                if since_refactor:
                    self.refactor(cost)
                    since_refactor = 0
                    k, direction = self.price(bland, dual_tol)
                    if k is None:
                        return "optimal"
                    continue
                return "optimal"
            p, theta, dlt = self.ratio(k, direction, bland)
            if p is None and not np.isfinite(theta):
                self.ray = (self.nb[k], direction, dlt)
                return "unbounded"
            if p is None:
                self.flip(k, direction, theta, dlt)
                self.pivots += 1
            else:
                self.pivot(p, k, direction, theta, dlt)
                since_refactor += 1
            if theta <= 0.0:
                degenerate += 1
                if degenerate >= self.stall_limit:
                    bland = True
            else:
                degenerate = 0
                bland = False
            if since_refactor >= self.refactor_every:
                self.refactor(cost)
                since_refactor = 0

    def artificial_sum(self) -> float:
        art = self.head >= self.nt
        return float(self.xB[art].sum())


def _row_scales(A: np.ndarray) -> np.ndarray:
    s = np.abs(A).max(axis=1, initial=0.0)
    return np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 1.0)


def equilibrate(lp: LinearProgram) -> tuple[LinearProgram, np.ndarray, np.ndarray]:
    """Copy of ``lp`` with every row scaled to unit max-norm, plus the row scales."""
    se, si = _row_scales(lp.A_eq), _row_scales(lp.A_in)
    scaled = LinearProgram(lp.c, se[:, None] * lp.A_eq, se * lp.b_eq, si[:, None] * lp.A_in, si * lp.b_in,
                           lp.lo, lp.up)
    return scaled, se, si


def solve_lp(
    lp: LinearProgram,
    tol: float = 1e-8,
    max_iter: int | None = None,
    refactor: int = 100,
    stall: int = 50,
    warm: tuple | None = None,
) -> SolveResult:
    """Solve ``lp`` by the two-phase bounded primal simplex method.

    Rows are equilibrated first; multipliers and certificates are reported
    for the original rows.  ``warm`` is the ``basis`` of an earlier result on
    a problem with the same shape; it is used when it is primal feasible and
    silently ignored otherwise.
    """
    scaled, se, si = equilibrate(lp)
    res = _simplex(scaled, tol, max_iter, refactor, stall, warm)
    if res.y_eq is not None:
        res.y_eq = res.y_eq * se
        res.y_in = res.y_in * si
    if res.status is Status.INFEASIBLE and res.certificate is not None:
        res.certificate = res.certificate * np.concatenate([se, si])
    return res


def _simplex(lp: LinearProgram, tol, max_iter, refactor, stall, warm=None) -> SolveResult:
    A, b, lo, up = lp.standard_form()
    n, me = lp.n, lp.m_eq
    m = A.shape[0]
    if max_iter is None:
        max_iter = 50 * (m + n)
    tab = _Tableau(A, b, lo, up, feas_tol=1e-2 * tol, opt_tol=1e-2 * tol, piv_tol=1e-9,
                   refactor=refactor, stall=stall, warm=warm)

    if (tab.head >= tab.nt).any():
        state = tab.run(None, max_iter)
        if state == "limit":
            return SolveResult(Status.ITERATION_LIMIT, x=tab.values()[:n], iterations=tab.pivots,
                               message="iteration limit in phase 1")
        tab.refactor(None)
        infeas = tab.artificial_sum()
        if infeas > tol * max(1.0, float(np.abs(b).max(initial=0.0))):
            y = tab.y.copy()
            return SolveResult(
                Status.INFEASIBLE,
                x=tab.values()[:n],
                certificate=y,
                iterations=tab.pivots,
                message=f"phase 1 optimum {infeas:.3e} > 0",
            )
    tab.phase = 2
    cost = np.concatenate([lp.c, np.zeros(tab.nt - n)])
    tab.refactor(cost)
    state = tab.run(cost, max_iter)
    x_all = tab.values()
    x = x_all[:n]
    if state == "unbounded":
        q, direction, dlt = tab.ray
        ray = np.zeros(tab.nt)
        ray[q] = direction
        real = tab.head < tab.nt
        ray[tab.head[real]] = -dlt[real]
        return SolveResult(Status.UNBOUNDED, x=x, objective=-np.inf, certificate=ray[:n],
                           iterations=tab.pivots, message="unbounded ray found")
    if state == "limit":
        return SolveResult(Status.ITERATION_LIMIT, x=x, objective=float(lp.c @ x),
                           iterations=tab.pivots, message="iteration limit in phase 2")
    y = tab.y
    nonbasic = np.zeros(n, dtype=int)
    nbs = ~tab.is_basic[:n]
    nonbasic[nbs & (tab.x[:n] == lo[:n])] = -1
    nonbasic[nbs & (tab.x[:n] == up[:n]) & (lo[:n] != up[:n])] = 1
    redundant = np.zeros(me, dtype=bool)
    art_rows = tab.head[tab.head >= tab.nt] - tab.nt
    redundant[art_rows[art_rows < me]] = True
    return SolveResult(
        Status.OPTIMAL,
        x=x,
        objective=float(lp.c @ x),
        y_eq=y[:me].copy(),
        y_in=y[me:].copy(),
        reduced_costs=tab.d[:n].copy(),
        iterations=tab.pivots,
        nonbasic=nonbasic,
        active_rows=~tab.is_basic[n:],
        redundant_eq=redundant,
        basis=tab.basis(),
    )


def check_farkas(lp: LinearProgram, y: np.ndarray, tol: float = 1e-9) -> float:
    """Infeasibility margin certified by row multipliers ``y``.

    Returns ``y.b - max{y.(A x + s) : bounds, s >= 0}``; a positive value
    proves that the constraints admit no solution.
    """
    A, b, lo, up = lp.standard_form()
    g = y @ A
    g = np.where(np.abs(g) <= tol * max(1.0, np.abs(y).max(initial=0.0)), 0.0, g)
    with np.errstate(invalid="ignore"):
        best = np.where(g > 0, g * up, np.where(g < 0, g * lo, 0.0))
    return float(y @ b - best.sum())
