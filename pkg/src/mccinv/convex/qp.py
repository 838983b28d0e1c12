"""Primal active-set method for convex quadratic programs.

    min 0.5 x.Q.x + q.x  s.t.  A_eq x = b_eq,  A_in x <= b_in,  lo <= x <= up

The start is the vertex returned by a phase-1 simplex solve; its nonbasic
bounds and rows form the initial (linearly independent) working set.  Each
iteration minimizes over the null space of the working set, so semidefinite
``Q`` is handled without regularization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .lp import LinearProgram, SolveResult, Status, equilibrate, solve_lp


@dataclass
class QuadraticProgram:
    """Dense convex QP data; bounds default to ``0 <= x < inf`` as for LPs."""

    Q: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lo: np.ndarray | None = None
    up: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.size
        self.Q = np.asarray(self.Q, dtype=float)
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be {n}x{n}")
        if not np.allclose(self.Q, self.Q.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(self.Q).max(initial=0))):
            raise ValueError("Q must be symmetric")
        self.Q = 0.5 * (self.Q + self.Q.T)
        scale = max(1.0, float(np.abs(self.Q).max(initial=0.0)))
        try:
            np.linalg.cholesky(self.Q + 1e-10 * scale * np.eye(n))
        except np.linalg.LinAlgError:
            raise ValueError("Q is not positive semidefinite") from None
        self._lp = LinearProgram(self.q, self.A_eq, self.b_eq, self.A_in, self.b_in, self.lo, self.up)
        self.A_eq, self.b_eq = self._lp.A_eq, self._lp.b_eq
        self.A_in, self.b_in = self._lp.A_in, self._lp.b_in
        self.lo, self.up = self._lp.lo, self._lp.up

    @property
    def n(self) -> int:
        return self.q.size

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.Q @ x + self.q @ x)

    def feasibility_lp(self) -> LinearProgram:
        return LinearProgram(np.zeros(self.n), self.A_eq, self.b_eq, self.A_in, self.b_in, self.lo, self.up)


def kkt_residuals(prob, x, y_eq, y_in, d) -> dict:
    """Infinity-norm KKT residuals of a primal-dual point.

    Sign convention shared by both kernels: ``grad - A_eq'y_eq - A_in'y_in = d``
    with ``y_in <= 0`` and ``d >= 0`` at a lower bound, ``d <= 0`` at an upper bound.
    """
    if isinstance(prob, QuadraticProgram):
        grad = prob.Q @ x + prob.q
    else:
        grad = prob.c
    stat = grad - prob.A_eq.T @ y_eq - prob.A_in.T @ y_in - d
    slack = prob.b_in - prob.A_in @ x
    primal = max(
        float(np.abs(prob.A_eq @ x - prob.b_eq).max(initial=0.0)),
        float(np.maximum(-slack, 0.0).max(initial=0.0)),
        float(np.maximum(prob.lo - x, 0.0).max(initial=0.0)),
        float(np.maximum(x - prob.up, 0.0).max(initial=0.0)),
    )
    dpos, dneg = np.maximum(d, 0.0), np.maximum(-d, 0.0)
    dual = max(
        float(np.maximum(y_in, 0.0).max(initial=0.0)),
        float(np.where(np.isinf(prob.lo), dpos, 0.0).max(initial=0.0)),
        float(np.where(np.isinf(prob.up), dneg, 0.0).max(initial=0.0)),
    )
    with np.errstate(invalid="ignore"):
        gap_lo = np.where(np.isfinite(prob.lo), dpos * (x - prob.lo), 0.0)
        gap_up = np.where(np.isfinite(prob.up), dneg * (prob.up - x), 0.0)
    comp = max(
        float(np.abs(y_in * slack).max(initial=0.0)),
        float(np.abs(gap_lo).max(initial=0.0)),
        float(np.abs(gap_up).max(initial=0.0)),
    )
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0)),
        "primal": primal,
        "dual": dual,
        "complementarity": comp,
    }


def _lstsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.lstsq(A, b, rcond=None)[0]
    except np.linalg.LinAlgError:
        # the SVD driver occasionally fails on badly scaled input; QR with pivoting does not
        return sla.lstsq(A, b, lapack_driver="gelsy")[0]


def _nullspace(C: np.ndarray, n: int) -> np.ndarray:
    if C.shape[0] == 0 or n == 0:
        return np.eye(n)
    try:
        _, sv, vt = np.linalg.svd(C, full_matrices=True)
    except np.linalg.LinAlgError:
        _, sv, vt = sla.svd(C, full_matrices=True, lapack_driver="gesvd")
    rank = int((sv > 1e-11 * max(1.0, sv[0])).sum())
    return vt[rank:].T


def solve_qp(
    qp: QuadraticProgram,
    tol: float = 1e-8,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
) -> SolveResult:
    """Primal active-set solve with a null-space step on the working set.

    Rows are equilibrated internally.  Where the reduced Hessian is singular
    and the reduced gradient has a component in its kernel, the step follows
    that zero-curvature direction until a constraint blocks it; if nothing
    blocks, the problem is unbounded.  A feasible ``x0`` replaces the phase-1
    start; an infeasible one is ignored.
    """
    lp, se, si = equilibrate(qp.feasibility_lp())
    res = _active_set(qp, lp, tol, max_iter, x0)
    if res.y_eq is not None:
        res.y_eq = res.y_eq * se
        res.y_in = res.y_in * si
    if res.status is Status.INFEASIBLE and res.certificate is not None:
        res.certificate = res.certificate * np.concatenate([se, si])
    return res


def _working_set_at(x, lp: LinearProgram, feas_tol: float):
    """Greedy linearly independent working set among the constraints active at ``x``."""
    n = x.size
    basis = np.zeros((n, 0))

    def independent(a):
        nonlocal basis
        r = a - basis @ (basis.T @ a)
        r -= basis @ (basis.T @ r)
        nr = np.linalg.norm(r)
        if nr <= 1e-8 * np.linalg.norm(a):
            return False
        basis = np.column_stack([basis, r / nr])
        return True

    side = np.zeros(n, dtype=int)
    fixed = lp.lo == lp.up
    for j in np.flatnonzero(fixed):
        if independent(np.eye(1, n, j).ravel()):
            side[j] = 2
    eq_ok = np.zeros(lp.m_eq, dtype=bool)
    for i in range(lp.m_eq):
        eq_ok[i] = independent(lp.A_eq[i])
    for j in np.flatnonzero(~fixed):
        at_lo = x[j] <= lp.lo[j] + feas_tol
        at_up = x[j] >= lp.up[j] - feas_tol
        if (at_lo or at_up) and independent(np.eye(1, n, j).ravel()):
            side[j] = -1 if at_lo else 1
    active = np.zeros(lp.m_in, dtype=bool)
    slack = lp.b_in - lp.A_in @ x
    for i in np.flatnonzero(slack <= feas_tol):
        active[i] = independent(lp.A_in[i])
    return side, np.flatnonzero(eq_ok), active


def _feasible(x, lp: LinearProgram, feas_tol: float) -> bool:
    if x is None or x.shape != (lp.n,) or not np.all(np.isfinite(x)):
        return False
    return bool(np.all(x >= lp.lo - feas_tol) and np.all(x <= lp.up + feas_tol)
                and np.all(np.abs(lp.A_eq @ x - lp.b_eq) <= feas_tol)
                and np.all(lp.A_in @ x - lp.b_in <= feas_tol))


def _active_set(qp: QuadraticProgram, lp: LinearProgram, tol: float, max_iter: int | None,
                x0: np.ndarray | None = None) -> SolveResult:
    n = qp.n
    A_eq, A_in, b_in = lp.A_eq, lp.A_in, lp.b_in
    me, mi = A_eq.shape[0], A_in.shape[0]
    if max_iter is None:
        max_iter = 20 * (n + me + mi) + 100
    lo, up = qp.lo, qp.up
    feas_tol = tol * max(1.0, float(np.abs(lp.b_in).max(initial=0.0)), float(np.abs(lp.b_eq).max(initial=0.0)))

    if x0 is not None and _feasible(np.asarray(x0, dtype=float), lp, feas_tol):
        x = np.clip(np.asarray(x0, dtype=float), lo, up)
        side, eq_rows, active = _working_set_at(x, lp, feas_tol)
        x[side == -1] = lo[side == -1]
        x[side == 1] = up[side == 1]
    else:
        start = solve_lp(lp, tol=tol)
        if start.status is Status.INFEASIBLE:
            return SolveResult(Status.INFEASIBLE, x=start.x, certificate=start.certificate,
                               iterations=start.iterations, message="phase 1: " + start.message)
        if start.status is not Status.OPTIMAL:
            return SolveResult(Status.ITERATION_LIMIT, x=start.x, iterations=start.iterations,
                               message="phase 1 did not finish")
        x = np.clip(start.x, lo, up)
        # bound state per variable: -1 lower, +1 upper, 2 fixed (lo == up), 0 free
        side = start.nonbasic.copy()
        side[lo == up] = 2
        x[side == -1] = lo[side == -1]
        x[side == 1] = up[side == 1]
        eq_rows = np.flatnonzero(~start.redundant_eq)
        active = start.active_rows.copy()

    qscale = max(1.0, float(np.abs(qp.Q).max(initial=0.0)))
    scale = max(qscale, float(np.abs(qp.q).max(initial=0.0)))
    dual_tol = 1e-2 * tol * scale
    stat_tol = 1e-3 * tol
    curv_tol = 1e-10 * qscale
    dep_tol = 1e-9
    zero_steps = 0

    for it in range(1, max_iter + 1):
        F = np.flatnonzero(side == 0)
        rows_in = np.flatnonzero(active)
        C = np.vstack([A_eq[eq_rows], A_in[rows_in]])[:, F]
        g = qp.Q @ x + qp.q
        Z = _nullspace(C, F.size)
        p = np.zeros(n)
        unbounded_dir = False
        stationary = True
        gnorm = max(1.0, float(np.abs(g).max(initial=0.0)))
        if Z.shape[1]:
            gr = Z.T @ g[F]
            if np.abs(gr).max() > stat_tol * gnorm:
                Hr = Z.T @ qp.Q[np.ix_(F, F)] @ Z
                ev, V = np.linalg.eigh(0.5 * (Hr + Hr.T))
                flat = ev <= curv_tol
                gv = V.T @ gr
                if flat.any() and np.abs(gv[flat]).max() > stat_tol * gnorm:
                    # unit direction: its length is set by the ratio test, not by |gv|
                    d = -(V[:, flat] @ gv[flat])
                    d /= np.linalg.norm(d)
                    unbounded_dir = True
                    stationary = False
                else:
                    d = -(V[:, ~flat] @ (gv[~flat] / ev[~flat]))
                p[F] = Z @ d
                if not unbounded_dir:
                    # a Newton step whose predicted gain is lost in round-off counts as stationary
                    gain = -0.5 * (g @ p)
                    stationary = gain <= 1e-15 * (1.0 + abs(qp.value(x)) + np.abs(x).max(initial=0.0) * gnorm)

        if stationary:
            # stationary on the working set: g_F = -C'lam
            nc = C.shape[0]
            lam = _lstsq(C.T, -g[F]) if nc else np.zeros(0)
            lam_eq, lam_in = lam[: eq_rows.size], lam[eq_rows.size:]
            Cfull = np.vstack([A_eq[eq_rows], A_in[rows_in]])
            r = g + Cfull.T @ lam if nc else g.copy()
            cands = [(lam_in[k], 0, int(row)) for k, row in enumerate(rows_in)]
            for j in np.flatnonzero((side == -1) | (side == 1)):
                cands.append((r[j] if side[j] == -1 else -r[j], 1, int(j)))
            worst = [c for c in cands if c[0] < -dual_tol]
            if not worst:
                y_eq = np.zeros(me)
                y_eq[eq_rows] = -lam_eq
                y_in = np.zeros(mi)
                y_in[rows_in] = -lam_in
                d = np.where(side != 0, r, 0.0)
                return SolveResult(Status.OPTIMAL, x=x, objective=qp.value(x), y_eq=y_eq, y_in=y_in,
                                   reduced_costs=d, iterations=it, active_rows=active.copy(),
                                   nonbasic=np.where(np.abs(side) == 1, side, 0))
            worst.sort(key=(lambda c: (c[1], c[2])) if zero_steps > 50 else (lambda c: c[0]))
            _, kind, idx = worst[0]
            if kind == 0:
                active[idx] = False
            else:
                side[idx] = 0
            continue

        # ratio test against constraints outside the working set
        alpha = 1.0
        block = None
        pn = np.linalg.norm(p)
        if unbounded_dir:
            # "flat" only means below curv_tol; stop at the exact line minimizer
            # when the measured curvature along p is above round-off
            curv = float(p @ qp.Q @ p)
            alpha = -(g @ p) / curv if curv > 1e-14 * qscale * pn * pn else np.inf
        ap = A_in @ p
        slack = b_in - A_in @ x
        cand = (~active) & (ap > dep_tol * np.linalg.norm(A_in, axis=1) * pn)
        if cand.any():
            ratios = np.maximum(slack[cand], 0.0) / ap[cand]
            k = int(np.argmin(ratios))
            if ratios[k] < alpha:
                alpha, block = ratios[k], ("row", int(np.flatnonzero(cand)[k]))
        moving = (side == 0) & (np.abs(p) > dep_tol * pn)
        with np.errstate(divide="ignore", invalid="ignore"):
            rl = np.where(moving & (p < 0) & np.isfinite(lo), np.maximum(x - lo, 0.0) / -p, np.inf)
            ru = np.where(moving & (p > 0) & np.isfinite(up), np.maximum(up - x, 0.0) / p, np.inf)
        jl, ju = int(np.argmin(rl)), int(np.argmin(ru))
        if rl[jl] < alpha:
            alpha, block = rl[jl], ("lo", jl)
        if ru[ju] < alpha:
            alpha, block = ru[ju], ("up", ju)
        if block is None and not np.isfinite(alpha):
            return SolveResult(Status.UNBOUNDED, x=x, objective=-np.inf, certificate=p,
                               iterations=it, message="descent direction of zero curvature")
        x = x + alpha * p
        zero_steps = zero_steps + 1 if alpha == 0.0 else 0
        if block is not None:
            kind, idx = block
            if kind == "row":
                active[idx] = True
            elif kind == "lo":
                x[idx] = lo[idx]
                side[idx] = -1
            else:
                x[idx] = up[idx]
                side[idx] = 1
    return SolveResult(Status.ITERATION_LIMIT, x=x, objective=qp.value(x), iterations=max_iter,
                       message="active-set iteration limit")
