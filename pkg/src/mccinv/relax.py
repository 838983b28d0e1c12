"""Locally averaged McCormick relaxation of the coefficient identification problem.

Variables are the interior nodal state ``u``, the h-cell coefficients ``w``
and one product variable ``z_i`` per tau-cell.  The constraints are

* the state equation with the bilinear term replaced, ``K u + G z = F``;
* four McCormick rows per tau-cell in ``(w_j, a_i.u, z_i)``, where ``a_i.u``
  is the cell mean of ``u`` and ``j`` the h-cell containing tau-cell ``i``;
* two state-bound rows per tau-cell, ``u_lo_i <= a_i.u <= u_hi_i``;
* boxes on ``w`` and ``z``.

``K`` is the (invertible) stiffness matrix, so the solvers work on the
reduced variables ``(w, z)`` with ``u = u0 - H z``; the full blocks are kept
for feasibility checks and model dumps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from . import fem
from .convex import LinearProgram, QuadraticProgram, SolveResult, Status, solve_qp
from .fem import NodalField, ProblemData
from .mesh import CellField, GridTriple, cell_average_weights

log = logging.getLogger(__name__)


class BoundsInconsistentError(RuntimeError):
    """The relaxation is infeasible: the state bounds cut off every feasible point."""

    def __init__(self, message: str, result: SolveResult | None = None):
        self.result = result
        super().__init__(message)


@dataclass(frozen=True)
class BoundsProfile:
    """Bounds on tau-cell state means, h-cell coefficients and tau-cell products."""

    u_lo: np.ndarray
    u_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    owner: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("u_lo", "u_hi", "w_lo", "w_hi", "z_lo", "z_hi", "owner"):
            arr = np.array(getattr(self, name), dtype=int if name == "owner" else float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n_tau, n_h = self.u_lo.size, self.w_lo.size
        if self.u_hi.size != n_tau or self.z_lo.size != n_tau or self.z_hi.size != n_tau:
            raise ValueError("state and product bounds need one entry per tau-cell")
        if self.w_hi.size != n_h or self.owner.size != n_tau:
            raise ValueError("inconsistent bound profile sizes")
        if np.any(self.u_lo > self.u_hi) or np.any(self.w_lo > self.w_hi) or np.any(self.z_lo > self.z_hi):
            raise ValueError("lower bound exceeds upper bound")

    @classmethod
    def from_state_bounds(cls, u_lo, u_hi, w_lo, w_hi, owner) -> "BoundsProfile":
        """Profile whose product bounds are derived from the given state/coefficient bounds."""
        u_lo = np.asarray(u_lo, dtype=float)
        u_hi = np.asarray(u_hi, dtype=float)
        z_lo, z_hi = _corner_products(u_lo, u_hi, np.asarray(w_lo)[owner], np.asarray(w_hi)[owner])
        return cls(u_lo, u_hi, w_lo, w_hi, z_lo, z_hi, owner)

    @classmethod
    def conservative(cls, pd: ProblemData, triple: GridTriple, magnitude: float = 1e3) -> "BoundsProfile":
        n_tau, n_h = triple.tau.n_cells, triple.h.n_cells
        return cls.from_state_bounds(
            np.full(n_tau, -magnitude), np.full(n_tau, magnitude),
            np.full(n_h, pd.w_lo), np.full(n_h, pd.w_hi), triple.owner,
        )

    @property
    def n_tau(self) -> int:
        return self.u_lo.size

    def volume(self) -> float:
        return float((self.u_hi - self.u_lo).sum())

    def with_state_bounds(self, u_lo, u_hi) -> "BoundsProfile":
        return BoundsProfile.from_state_bounds(u_lo, u_hi, self.w_lo, self.w_hi, self.owner)


def _corner_products(u_lo, u_hi, w_lo, w_hi):
    corners = np.stack([u_lo * w_lo, u_lo * w_hi, u_hi * w_lo, u_hi * w_hi])
    return corners.min(0), corners.max(0)


def derive_z_bounds(profile: BoundsProfile) -> tuple[np.ndarray, np.ndarray]:
    """Range of ``u * w`` over each tau-cell box: min and max of the four corner products."""
    o = profile.owner
    return _corner_products(profile.u_lo, profile.u_hi, profile.w_lo[o], profile.w_hi[o])


@dataclass(frozen=True)
class MccRows:
    """Rows ``cw * w_j + cu * ubar_i + cz * z_i <= rhs``, four per tau-cell.

    Row ``4 i + k`` belongs to tau-cell ``i``; ``k`` follows the usual order
    (two underestimators, then two overestimators).
    """

    cw: np.ndarray
    cu: np.ndarray
    cz: np.ndarray
    rhs: np.ndarray
    cell: np.ndarray
    hcell: np.ndarray

    def __len__(self):
        return self.rhs.size

    def evaluate(self, ubar, w, z) -> np.ndarray:
        """Row values ``lhs - rhs``; feasible points give values <= 0."""
        ubar, w, z = np.asarray(ubar), np.asarray(w), np.asarray(z)
        return self.cw * w[self.hcell] + self.cu * ubar[self.cell] + self.cz * z[self.cell] - self.rhs


def build_mcc_rows(profile: BoundsProfile, triple: GridTriple | None = None) -> MccRows:
    if triple is not None and not np.array_equal(triple.owner, profile.owner):
        raise ValueError("profile and grid triple disagree on the tau-to-h map")
    o = profile.owner
    ul, uu = profile.u_lo, profile.u_hi
    wl, wu = profile.w_lo[o], profile.w_hi[o]
    one = np.ones_like(ul)
    # ul w + u wl - ul wl - z <= 0, uu w + u wu - uu wu - z <= 0,
    # z - uu w - u wl + uu wl <= 0, z - ul w - u wu + ul wu <= 0
    cw = np.stack([ul, uu, -uu, -ul], axis=1).ravel()
    cu = np.stack([wl, wu, -wl, -wu], axis=1).ravel()
    cz = np.stack([-one, -one, one, one], axis=1).ravel()
    rhs = np.stack([ul * wl, uu * wu, -uu * wl, -ul * wu], axis=1).ravel()
    cell = np.repeat(np.arange(profile.n_tau), 4)
    return MccRows(cw, cu, cz, rhs, cell, o[cell])


@dataclass(frozen=True)
class Residual:
    """Largest constraint violation of a point and where it occurs."""

    value: float
    cell: int
    kind: str
    per_cell: np.ndarray = field(repr=False)


_KINDS = ("mcc1", "mcc2", "mcc3", "mcc4", "u_lo", "u_hi", "z_lo", "z_hi", "w_lo", "w_hi")


def mcc_residual(profile: BoundsProfile, ubar, w, z) -> Residual:
    """Positive parts of the McCormick rows, state bounds and boxes per tau-cell.

    ``ubar`` are the tau-cell means of the state.
    """
    ubar, w, z = (np.asarray(a, dtype=float) for a in (ubar, w, z))
    rows = build_mcc_rows(profile)
    wt = w[profile.owner]
    table = np.column_stack([
        rows.evaluate(ubar, w, z).reshape(-1, 4),
        profile.u_lo - ubar, ubar - profile.u_hi,
        profile.z_lo - z, z - profile.z_hi,
        profile.w_lo[profile.owner] - wt, wt - profile.w_hi[profile.owner],
    ])
    table = np.maximum(table, 0.0)
    flat = int(np.argmax(table))
    cell, k = divmod(flat, table.shape[1])
    return Residual(float(table.flat[flat]), cell, _KINDS[k], table)


@dataclass(frozen=True)
class RelaxationSolution:
    """Minimizer of the relaxation.

    The objective depends on ``w`` only through the rows, so for the optimal
    ``z`` a whole interval of coefficients per h-cell is optimal.  ``w`` is
    the representative closest to ``z = ubar * w`` (see
    :func:`consistent_coefficient`); ``w_kernel`` is the point the QP kernel
    stopped at.
    """

    u: NodalField
    w: CellField
    z: np.ndarray
    value: float  # unsquared L2 misfit, sqrt(2 * qp optimum)
    qp_optimum: float  # 0.5 * misfit^2
    status: Status
    result: SolveResult = field(repr=False)
    w_kernel: np.ndarray | None = field(default=None, repr=False)


class RelaxationModel:
    """Assembled relaxation for one data set, grid triple and bound profile."""

    def __init__(self, pd: ProblemData, triple: GridTriple, profile: BoundsProfile, y: NodalField):
        if y.grid != triple.sim:
            raise ValueError("data must live on the simulation grid")
        if profile.n_tau != triple.tau.n_cells or profile.w_lo.size != triple.h.n_cells:
            raise ValueError("bound profile does not match the grid triple")
        if not np.array_equal(profile.owner, triple.owner):
            raise ValueError("bound profile does not match the tau-to-h embedding")
        self.pd = pd
        self.triple = triple
        self.profile = profile
        self.y = y
        self.base = _base_blocks(pd, triple)
        self.mcc = build_mcc_rows(profile, triple)

    @property
    def n_u(self) -> int:
        return self.triple.sim.n_cells - 1

    @property
    def n_w(self) -> int:
        return self.triple.h.n_cells

    @property
    def n_z(self) -> int:
        return self.triple.tau.n_cells

    def with_profile(self, profile: BoundsProfile) -> "RelaxationModel":
        return RelaxationModel(self.pd, self.triple, profile, self.y)

    def with_data(self, y: NodalField) -> "RelaxationModel":
        return RelaxationModel(self.pd, self.triple, self.profile, y)

    # -- reduced (w, z) form ------------------------------------------------

    @cached_property
    def reduced_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Inequality rows in ``(w, z)``: 4 McCormick rows then 2 state rows per tau-cell."""
        b = self.base
        nw, nz = self.n_w, self.n_z
        r = self.mcc
        n_rows = len(r) + 2 * nz
        A = np.zeros((n_rows, nw + nz))
        rows = np.arange(len(r))
        A[rows, r.hcell] = r.cw
        A[:len(r), nw:] = r.cu[:, None] * b.B[r.cell]
        A[rows, nw + r.cell] += r.cz
        rhs = np.empty(n_rows)
        rhs[:len(r)] = r.rhs - r.cu * b.c[r.cell]
        A[len(r)::2, nw:] = b.B
        A[len(r) + 1::2, nw:] = -b.B
        rhs[len(r)::2] = self.profile.u_hi - b.c
        rhs[len(r) + 1::2] = b.c - self.profile.u_lo
        return A, rhs

    @property
    def reduced_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        p = self.profile
        return np.concatenate([p.w_lo, p.z_lo]), np.concatenate([p.w_hi, p.z_hi])

    def averages_lp(self, cell: int, sense: int) -> LinearProgram:
        """LP minimizing ``sense * ubar_cell`` (constant ``c_cell`` dropped)."""
        A, rhs = self.reduced_rows
        lo, up = self.reduced_bounds
        cost = np.zeros(self.n_w + self.n_z)
        cost[self.n_w:] = sense * self.base.B[cell]
        return LinearProgram(cost, A_in=A, b_in=rhs, lo=lo, up=up)

    @cached_property
    def _objective_parts(self):
        b = self.base
        r0 = np.concatenate([[0.0], b.u0, [0.0]]) - self.y.values
        mr0 = b.mass @ r0
        Q = b.HtMH
        q = -b.H.T @ mr0[1:-1]
        const = 0.5 * float(r0 @ mr0)
        return Q, q, const

    def qp(self) -> QuadraticProgram:
        A, rhs = self.reduced_rows
        lo, up = self.reduced_bounds
        Qz, qz, _ = self._objective_parts
        nw, nz = self.n_w, self.n_z
        Q = np.zeros((nw + nz, nw + nz))
        Q[nw:, nw:] = Qz
        q = np.concatenate([np.zeros(nw), qz])
        return QuadraticProgram(Q, q, A_in=A, b_in=rhs, lo=lo, up=up)

    # -- full-space quantities ---------------------------------------------

    def state_from_z(self, z) -> NodalField:
        b = self.base
        u_int = b.u0 - b.H @ np.asarray(z, dtype=float)
        return NodalField(self.triple.sim, np.concatenate([[0.0], u_int, [0.0]]))

    def cell_means(self, u: NodalField) -> np.ndarray:
        return self.base.A_full @ u.values

    def lift(self, u: NodalField, w: CellField) -> np.ndarray:
        """Product variable of a state/coefficient pair: ``(P_tau u)(P_tau w)``."""
        return self.cell_means(u) * w.values[self.triple.owner]

    def objective(self, u: NodalField) -> float:
        """0.5 ||u - y||^2 in L2(0, 1)."""
        return 0.5 * fem.misfit(u, self.y) ** 2

    def equality_residual(self, u: NodalField, z) -> float:
        b = self.base
        u_int = u.values[1:-1]
        k = b.stiff_off
        Ku = b.stiff_diag * u_int
        Ku[1:] += k * u_int[:-1]
        Ku[:-1] += k * u_int[1:]
        res = Ku + b.G @ np.asarray(z) - b.load
        return float(np.abs(res).max() / max(1.0, np.abs(b.load).max()))

    def residual(self, u: NodalField, w: CellField, z) -> Residual:
        return mcc_residual(self.profile, self.cell_means(u), w.values, z)

    def full_qp(self) -> QuadraticProgram:
        """Unreduced QP in ``(u_interior, w, z)``; dense, meant for small grids and dumps."""
        b = self.base
        nu, nw, nz = self.n_u, self.n_w, self.n_z
        n = nu + nw + nz
        K = np.diag(b.stiff_diag) + np.diag(b.stiff_off, 1) + np.diag(b.stiff_off, -1)
        A_eq = np.hstack([K, np.zeros((nu, nw)), b.G])
        r = self.mcc
        A_avg = b.A_full[:, 1:-1].toarray()
        n_rows = len(r) + 2 * nz
        A_in = np.zeros((n_rows, n))
        rows = np.arange(len(r))
        A_in[:len(r), :nu] = r.cu[:, None] * A_avg[r.cell]
        A_in[rows, nu + r.hcell] = r.cw
        A_in[rows, nu + nw + r.cell] = r.cz
        A_in[len(r)::2, :nu] = A_avg
        A_in[len(r) + 1::2, :nu] = -A_avg
        b_in = np.concatenate([r.rhs, np.stack([self.profile.u_hi, -self.profile.u_lo], 1).ravel()])
        M = b.mass.toarray()
        Q = np.zeros((n, n))
        Q[:nu, :nu] = M[1:-1, 1:-1]
        q = np.zeros(n)
        q[:nu] = -(M @ self.y.values)[1:-1]
        lo = np.concatenate([np.full(nu, -np.inf), self.profile.w_lo, self.profile.z_lo])
        up = np.concatenate([np.full(nu, np.inf), self.profile.w_hi, self.profile.z_hi])
        return QuadraticProgram(Q, q, A_eq=A_eq, b_eq=b.load, A_in=A_in, b_in=b_in, lo=lo, up=up)

    @property
    def n_mcc_rows(self) -> int:
        return len(self.mcc)

    @property
    def n_state_rows(self) -> int:
        return 2 * self.n_z


@dataclass(frozen=True, eq=False)
class _Blocks:
    stiff_diag: np.ndarray
    stiff_off: np.ndarray
    load: np.ndarray
    mass: object
    G: np.ndarray  # (n_int, n_tau)
    A_full: object  # sparse (n_tau, n_nodes)
    u0: np.ndarray
    H: np.ndarray
    c: np.ndarray  # tau means of u0
    B: np.ndarray  # d(means)/dz = -A H
    HtMH: np.ndarray


_BLOCK_CACHE: dict = {}


def _base_blocks(pd: ProblemData, triple: GridTriple) -> _Blocks:
    """Data-independent blocks; cached per (problem, grids)."""
    key = (id(pd), triple.sim, triple.tau)
    hit = _BLOCK_CACHE.get(key)
    if hit is not None and hit[0] is pd:
        return hit[1]
    asm = fem.assembly(pd, triple.sim)
    G = fem.tau_load_matrix(pd, triple.tau, triple.sim)
    A_full = cell_average_weights(triple.tau, triple.sim)
    ab = np.zeros((2, asm.stiff_diag.size))
    ab[0] = asm.stiff_diag
    ab[1, :-1] = asm.stiff_off
    sol = sla.solveh_banded(ab, np.column_stack([asm.load, G]), lower=True)
    u0, H = sol[:, 0], sol[:, 1:]
    A_int = A_full[:, 1:-1]
    c = A_int @ u0
    B = -(A_int @ H)
    M_int = asm.mass[1:-1, 1:-1]
    HtMH = H.T @ (M_int @ H)
    HtMH = 0.5 * (HtMH + HtMH.T)
    blocks = _Blocks(asm.stiff_diag, asm.stiff_off, asm.load, asm.mass, G, A_full, u0, H, c, B, HtMH)
    if len(_BLOCK_CACHE) > 32:
        _BLOCK_CACHE.clear()
    _BLOCK_CACHE[key] = (pd, blocks)
    return blocks


def build_relaxation(pd: ProblemData, triple: GridTriple, profile: BoundsProfile, y: NodalField) -> RelaxationModel:
    return RelaxationModel(pd, triple, profile, y)


def coefficient_interval(profile: BoundsProfile, ubar, z) -> tuple[np.ndarray, np.ndarray]:
    """Per h-cell range of ``w`` admitted by the rows and the box for fixed ``ubar`` and ``z``."""
    rows = build_mcc_rows(profile)
    ubar, z = np.asarray(ubar, dtype=float), np.asarray(z, dtype=float)
    rest = rows.rhs - rows.cu * ubar[rows.cell] - rows.cz * z[rows.cell]
    lo, hi = profile.w_lo.copy(), profile.w_hi.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = rest / rows.cw
    pos, neg = rows.cw > 0, rows.cw < 0
    np.minimum.at(hi, rows.hcell[pos], bound[pos])
    np.maximum.at(lo, rows.hcell[neg], bound[neg])
    return lo, hi


def consistent_coefficient(profile: BoundsProfile, ubar, z, w_ref) -> np.ndarray:
    """Coefficient in the admissible interval closest to the product relation.

    Per h-cell this minimizes ``sum_i (ubar_i w - z_i)^2`` over the tau-cells
    it contains, i.e. clips the least-squares ratio to the interval.  Cells
    whose interval is empty by round-off, or whose means vanish, keep
    ``w_ref``.
    """
    ubar, z = np.asarray(ubar, dtype=float), np.asarray(z, dtype=float)
    w_ref = np.asarray(w_ref, dtype=float)
    o, n = profile.owner, profile.w_lo.size
    lo, hi = coefficient_interval(profile, ubar, z)
    num = np.bincount(o, ubar * z, minlength=n)
    den = np.bincount(o, ubar * ubar, minlength=n)
    ok = (den > 0) & (lo <= hi)
    w = w_ref.copy()
    w[ok] = np.clip(num[ok] / den[ok], lo[ok], hi[ok])
    return np.clip(w, profile.w_lo, profile.w_hi)


def solve_relaxation(model: RelaxationModel, tol: float = 1e-10) -> RelaxationSolution:
    """Solve the relaxation QP; the reported value is the unsquared L2 misfit.

    The kernel tolerance is absolute on a problem whose data are of order one
    while the optimum can be ~1e-11, hence the tight default.
    """
    res = solve_qp(model.qp(), tol=tol)
    if res.status is Status.INFEASIBLE:
        raise BoundsInconsistentError("relaxation infeasible: state bounds cut off all points", res)
    if res.status is not Status.OPTIMAL:
        log.warning("relaxation QP stopped early: %s", res.message)
    nw = model.n_w
    w_kernel = np.clip(res.x[:nw], model.profile.w_lo, model.profile.w_hi)
    z = res.x[nw:]
    u = model.state_from_z(z)
    w = consistent_coefficient(model.profile, model.cell_means(u), z, w_kernel)
    J = model.objective(u)
    return RelaxationSolution(
        u=u, w=CellField(model.triple.h, w), z=z, value=float(np.sqrt(2.0 * J)),
        qp_optimum=J, status=res.status, result=res, w_kernel=w_kernel,
    )
