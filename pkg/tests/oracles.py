"""Brute-force reference solvers used only by the tests."""

from __future__ import annotations

import itertools

import numpy as np


def _constraint_rows(A_eq, b_eq, A_in, b_in, lo, up):
    """All constraints as (row, rhs, kind) with kind 'eq' or 'le'."""
    n = A_eq.shape[1] if A_eq.size else A_in.shape[1] if A_in.size else lo.size
    rows, rhs, kind = [], [], []
    for a, b in zip(A_eq, b_eq):
        rows.append(a), rhs.append(b), kind.append("eq")
    for a, b in zip(A_in, b_in):
        rows.append(a), rhs.append(b), kind.append("le")
    eye = np.eye(n)
    for j in range(n):
        if np.isfinite(lo[j]):
            rows.append(-eye[j]), rhs.append(-lo[j]), kind.append("le")
        if np.isfinite(up[j]):
            rows.append(eye[j]), rhs.append(up[j]), kind.append("le")
    return np.array(rows).reshape(-1, n), np.array(rhs), np.array(kind)


def lp_vertex_min(c, A_eq, b_eq, A_in, b_in, lo, up, tol=1e-9):
    """Minimum of c.x over all vertices; None when no vertex is feasible.

    Only valid for bounded feasible sets (finite boxes), where the optimum is
    attained at a vertex.
    """
    n = c.size
    R, r, kind = _constraint_rows(A_eq, b_eq, A_in, b_in, lo, up)
    eq = np.flatnonzero(kind == "eq")
    le = np.flatnonzero(kind == "le")
    k = n - eq.size
    if k < 0:
        return None
    combos = np.array(list(itertools.combinations(le, k)), dtype=int).reshape(-1, k)
    idx = np.hstack([np.broadcast_to(eq, (combos.shape[0], eq.size)), combos]).astype(int)
    M = R[idx]
    rhs = r[idx]
    ok = np.abs(np.linalg.det(M)) > 1e-10
    if not ok.any():
        return None
    X = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
    scale = 1.0 + np.abs(r).max()
    feas = np.all(X @ R[le].T <= r[le] + tol * scale, axis=1)
    if eq.size:
        feas &= np.all(np.abs(X @ R[eq].T - r[eq]) <= tol * scale, axis=1)
    if not feas.any():
        return None
    vals = X[feas] @ c
    return float(vals.min())


def qp_active_set_min(Q, q, A_in, b_in, lo, up, tol=1e-9):
    """Minimum of a convex QP by enumerating candidate active sets.

    For each subset of inequality constraints the equality-constrained KKT
    system is solved; points that are primal feasible with nonnegative
    multipliers are KKT points, and the smallest objective among them is
    returned.
    """
    n = q.size
    R, r, _ = _constraint_rows(np.zeros((0, n)), np.zeros(0), A_in, b_in, lo, up)
    m = R.shape[0]
    best = None
    scale = 1.0 + np.abs(r).max(initial=0.0)
    for k in range(0, min(n, m) + 1):
        for S in itertools.combinations(range(m), k):
            S = list(S)
            C = R[S]
            K = np.block([[Q, C.T], [C, np.zeros((k, k))]])
            rhs = np.concatenate([-q, r[S]])
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            if np.abs(K @ sol - rhs).max() > 1e-8 * (1.0 + np.abs(rhs).max()):
                continue
            x, lam = sol[:n], sol[n:]
            if np.any(lam < -1e-8) or np.any(R @ x > r + tol * scale):
                continue
            val = 0.5 * x @ Q @ x + q @ x
            if best is None or val < best:
                best = val
    return best


def simpson_l2(fun, a=0.0, b=1.0, n=10240):
    """Composite Simpson rule for int_a^b fun(x) dx with n (even) subintervals."""
    x = np.linspace(a, b, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float((fun(x) * w).sum() * (b - a) / (3.0 * n))
