"""P1 finite elements for -u'' + f0 w u = f1 on (0, 1), u(0) = u(1) = 0.

The reaction coefficient ``w`` is either piecewise constant on a coarse grid
(integrated exactly over the common refinement with the simulation grid) or a
continuous function (4-point Gauss per element).  The locally averaged
variant replaces ``u w`` by the product of the tau-cell means.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import CellField, Grid, GridTriple, cell_average_weights, overlap_pieces

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(4)


class StateSolveError(RuntimeError):
    """The discrete state operator is singular or not positive definite."""

    def __init__(self, message: str, pivot: int | None = None):
        self.pivot = pivot
        super().__init__(message)


def _const(c: float) -> Callable:
    def f(x):
        return np.full(np.shape(x), float(c))

    f.constant = float(c)
    return f


def _benchmark_f1(x):
    return 50.0 * np.sin(2.0 * np.pi * np.asarray(x)) ** 2


def truth_coefficient(x):
    """cos(2 pi x)^2, the coefficient used to synthesize data."""
    return np.cos(2.0 * np.pi * np.asarray(x)) ** 2


_BENCHMARK = None


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Data of the state equation and the admissible coefficient range."""

    f0: Callable
    f1: Callable
    w_lo: float = 0.0
    w_hi: float = 1.0
    s: float = 1.0

    def __post_init__(self):
        if not self.w_lo <= self.w_hi:
            raise ValueError("w_lo must not exceed w_hi")
        if not 0.0 < self.s <= 1.0:
            raise ValueError("s must lie in (0, 1]")

    @classmethod
    def benchmark(cls) -> "ProblemData":
        """f0 = 36, f1 = 50 sin^2(2 pi x), w in [0, 1].

        Always the same (immutable) instance, so caches keyed on problem
        identity are shared across runs.
        """
        global _BENCHMARK
        if _BENCHMARK is None:
            _BENCHMARK = cls(f0=_const(36.0), f1=_benchmark_f1)
        return _BENCHMARK

    @classmethod
    def constant(cls, f0: float, f1: float, w_lo=0.0, w_hi=1.0) -> "ProblemData":
        return cls(f0=_const(f0), f1=_const(f1), w_lo=w_lo, w_hi=w_hi)


@dataclass(frozen=True)
class NodalField:
    """Nodal values of a continuous P1 function (boundary nodes included)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_cells + 1,):
            raise ValueError(
                f"expected {self.grid.n_cells + 1} nodal values, got shape {v.shape}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1]

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.grid.breakpoints, self.values)


# -- quadrature on the common refinement -------------------------------------


@dataclass(frozen=True, eq=False)
class PieceQuadrature:
    """Gauss points on every piece of sim x coarse, with P1 basis values."""

    sim: Grid
    coarse: Grid | None
    x: np.ndarray  # (P, 4)
    wts: np.ndarray  # (P, 4), include the piece length
    elem: np.ndarray  # (P,)
    cell: np.ndarray  # (P,) coarse cell, or element index when coarse is None
    phi_l: np.ndarray = field(repr=False)
    phi_r: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, sim: Grid, coarse: Grid | None = None) -> "PieceQuadrature":
        if coarse is None:
            left, right = sim.breakpoints[:-1], sim.breakpoints[1:]
            elem = np.arange(sim.n_cells)
            cell = elem
        else:
            left, right, (elem, cell) = overlap_pieces(sim, coarse)
        half = 0.5 * (right - left)
        x = (0.5 * (left + right))[:, None] + half[:, None] * _GAUSS_X[None, :]
        wts = half[:, None] * _GAUSS_W[None, :]
        xl = sim.breakpoints[elem][:, None]
        he = sim.widths[elem][:, None]
        phi_r = (x - xl) / he
        return cls(sim, coarse, x, wts, elem, cell, 1.0 - phi_r, phi_r)

    def element_bands(self, coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full-node tridiagonal bands of the weighted mass matrix int coef phi_k phi_l."""
        n = self.sim.n_cells
        cw = coef * self.wts
        ll = np.bincount(self.elem, (cw * self.phi_l**2).sum(1), minlength=n)
        lr = np.bincount(self.elem, (cw * self.phi_l * self.phi_r).sum(1), minlength=n)
        rr = np.bincount(self.elem, (cw * self.phi_r**2).sum(1), minlength=n)
        diag = np.zeros(n + 1)
        diag[:-1] += ll
        diag[1:] += rr
        return diag, lr

    def interpolate(self, nodal: np.ndarray) -> np.ndarray:
        return nodal[self.elem][:, None] * self.phi_l + nodal[self.elem + 1][:, None] * self.phi_r


@lru_cache(maxsize=64)
def _quadrature(sim: Grid, coarse: Grid | None) -> PieceQuadrature:
    return PieceQuadrature.build(sim, coarse)


@dataclass(frozen=True, eq=False)
class Assembly:
    """Coefficient-independent pieces of the discrete state equation."""

    sim: Grid
    stiff_diag: np.ndarray  # interior
    stiff_off: np.ndarray
    mass: sp.csr_matrix  # full nodes
    load: np.ndarray  # interior
    f0_elem: np.ndarray  # f0 at element Gauss points (N, 4)


@lru_cache(maxsize=32)
def assembly(pd: ProblemData, sim: Grid) -> Assembly:
    he = sim.widths
    n = sim.n_cells
    kd = np.zeros(n + 1)
    kd[:-1] += 1.0 / he
    kd[1:] += 1.0 / he
    q = _quadrature(sim, None)
    f1q = pd.f1(q.x) * q.wts
    load = np.zeros(n + 1)
    load[:-1] += (f1q * q.phi_l).sum(1)
    load[1:] += (f1q * q.phi_r).sum(1)
    return Assembly(
        sim=sim,
        stiff_diag=kd[1:-1],
        stiff_off=-1.0 / he[1:-1],
        mass=assembly_mass(sim),
        load=load[1:-1],
        f0_elem=pd.f0(q.x),
    )


def _check_interior(sim: Grid):
    if sim.n_cells < 2:
        raise ValueError("the simulation grid needs at least two cells")


def _solve_tridiag(diag: np.ndarray, off: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    ab = np.zeros((2, diag.size))
    ab[0] = diag
    ab[1, :-1] = off
    try:
        return sla.solveh_banded(ab, rhs, lower=True, check_finite=True)
    except sla.LinAlgError as exc:
        pivot = None
        msg = str(exc)
        digits = "".join(ch if ch.isdigit() else " " for ch in msg).split()
        if digits:
            pivot = int(digits[0])
        raise StateSolveError(f"state operator not positive definite ({msg})", pivot) from exc


def reaction_bands(pd: ProblemData, w, sim: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Full-node bands of int f0 w phi_k phi_l.

    ``w`` is a :class:`CellField` (exact on the common refinement) or a
    callable (Gauss per element).
    """
    if isinstance(w, CellField):
        q = _quadrature(sim, w.grid)
        coef = pd.f0(q.x) * w.values[q.cell][:, None]
    else:
        q = _quadrature(sim, None)
        coef = assembly(pd, sim).f0_elem * w(q.x)
    return q.element_bands(coef)


def solve_state(pd: ProblemData, w, sim: Grid) -> NodalField:
    """Solve the P1 system for a piecewise-constant or continuous coefficient."""
    _check_interior(sim)
    if isinstance(w, CellField) and not np.all(np.isfinite(w.values)):
        raise ValueError("coefficient values must be finite")
    asm = assembly(pd, sim)
    rd, ro = reaction_bands(pd, w, sim)
    u = _solve_tridiag(asm.stiff_diag + rd[1:-1], asm.stiff_off + ro[1:-1], asm.load)
    return NodalField(sim, np.concatenate([[0.0], u, [0.0]]))


def tau_load_matrix(pd: ProblemData, tau: Grid, sim: Grid) -> np.ndarray:
    """Columns ``g_i[k] = int over tau-cell i of f0 phi_k`` on interior nodes."""
    q = _quadrature(sim, tau)
    fw = pd.f0(q.x) * q.wts
    n = sim.n_cells
    g = np.zeros((n + 1, tau.n_cells))
    np.add.at(g, (q.elem, q.cell), (fw * q.phi_l).sum(1))
    np.add.at(g, (q.elem + 1, q.cell), (fw * q.phi_r).sum(1))
    return g[1:-1]


def averaged_state_matrix(pd: ProblemData, w: CellField, triple: GridTriple) -> sp.csc_matrix:
    asm = assembly(pd, triple.sim)
    a = cell_average_weights(triple.tau, triple.sim)[:, 1:-1]
    g = sp.csr_matrix(tau_load_matrix(pd, triple.tau, triple.sim))
    w_tau = w.values[triple.owner] if w.grid == triple.h else None
    if w_tau is None:
        raise ValueError("coefficient must live on the h grid of the triple")
    k = sp.diags([asm.stiff_off, asm.stiff_diag, asm.stiff_off], [-1, 0, 1])
    return (k + g @ sp.diags(w_tau) @ a).tocsc()


def solve_state_averaged(pd: ProblemData, w: CellField, triple: GridTriple) -> NodalField:
    """Solve K u + sum_i (P_tau w)_i g_i (a_i . u) = F."""
    _check_interior(triple.sim)
    mat = averaged_state_matrix(pd, w, triple)
    try:
        lu = spla.splu(mat)
    except RuntimeError as exc:
        raise StateSolveError(f"averaged state operator is singular ({exc})") from exc
    u = lu.solve(assembly(pd, triple.sim).load)
    if not np.all(np.isfinite(u)):
        raise StateSolveError("averaged state operator is singular")
    return NodalField(triple.sim, np.concatenate([[0.0], u, [0.0]]))


@lru_cache(maxsize=32)
def assembly_mass(sim: Grid) -> sp.csr_matrix:
    he = sim.widths
    md = np.zeros(sim.n_cells + 1)
    md[:-1] += he / 3.0
    md[1:] += he / 3.0
    return sp.diags([he / 6.0, md, he / 6.0], [-1, 0, 1], format="csr")


def misfit(u: NodalField, y: NodalField) -> float:
    """L2(0, 1) distance of two P1 functions (consistent mass matrix)."""
    if u.grid != y.grid:
        raise ValueError("misfit of fields on different grids")
    d = u.values - y.values
    return float(np.sqrt(max(d @ (assembly_mass(u.grid) @ d), 0.0)))


def objective_and_gradient(pd: ProblemData, w: CellField, y: NodalField, sim: Grid):
    """J(w) = 0.5 ||u(w) - y||^2 and its gradient with respect to the h-cell values.

    Returns ``(J, grad, u)``; ``grad[j] = -int over h-cell j of f0 u p`` with
    the adjoint ``p`` solving the state operator against ``M (u - y)``.
    """
    asm = assembly(pd, sim)
    q = _quadrature(sim, w.grid)
    f0q = pd.f0(q.x)
    rd, ro = q.element_bands(f0q * w.values[q.cell][:, None])
    diag = asm.stiff_diag + rd[1:-1]
    off = asm.stiff_off + ro[1:-1]
    u_int = _solve_tridiag(diag, off, asm.load)
    u = np.concatenate([[0.0], u_int, [0.0]])
    r = asm.mass @ (u - y.values)
    J = 0.5 * float((u - y.values) @ r)
    p_int = _solve_tridiag(diag, off, r[1:-1])
    p = np.concatenate([[0.0], p_int, [0.0]])
    integrand = (f0q * q.wts * q.interpolate(u) * q.interpolate(p)).sum(1)
    grad = -np.bincount(q.cell, integrand, minlength=w.grid.n_cells)
    return J, grad, NodalField(sim, u)


def adjoint_gradient(pd: ProblemData, w: CellField, y: NodalField, sim: Grid) -> CellField:
    if y.grid != sim:
        raise ValueError("data must live on the simulation grid")
    _, grad, _ = objective_and_gradient(pd, w, y, sim)
    return CellField(w.grid, grad)
