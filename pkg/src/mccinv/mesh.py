"""Uniform partitions of the unit interval and piecewise-constant projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class EmbeddingError(ValueError):
    """Raised when a coarse grid is not a union of cells of a finer grid."""

    def __init__(self, breakpoint: float, index: int):
        self.breakpoint = breakpoint
        self.index = index
        super().__init__(
            f"embedding violated: coarse breakpoint {index} at x={breakpoint:.17g} "
            "has no matching fine breakpoint"
        )


@dataclass(frozen=True, eq=False)
class Grid:
    """Partition of (0, 1) into ``n_cells`` intervals."""

    n_cells: int
    breakpoints: np.ndarray = field(repr=False)

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.ndim != 1 or bp.size != self.n_cells + 1:
            raise ValueError("need n_cells + 1 breakpoints")
        if bp[0] != 0.0 or bp[-1] != 1.0 or np.any(np.diff(bp) <= 0.0):
            raise ValueError("breakpoints must increase strictly from 0 to 1")
        bp.setflags(write=False)
        object.__setattr__(self, "breakpoints", bp)

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def midpoints(self) -> np.ndarray:
        bp = self.breakpoints
        return 0.5 * (bp[:-1] + bp[1:])

    def locate(self, x) -> np.ndarray:
        """Index of the cell containing each point (right-closed at x=1)."""
        idx = np.searchsorted(self.breakpoints, np.asarray(x, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.n_cells - 1)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return self.n_cells == other.n_cells and np.array_equal(
            self.breakpoints, other.breakpoints
        )

    def __hash__(self):
        return hash((self.n_cells, self.breakpoints.tobytes()))


@dataclass(frozen=True)
class CellField:
    """Piecewise-constant function, one value per cell of ``grid``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_cells,):
            raise ValueError(
                f"expected {self.grid.n_cells} cell values, got shape {v.shape}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, x) -> np.ndarray:
        return self.values[self.grid.locate(x)]


@dataclass(frozen=True)
class GridTriple:
    """Simulation grid plus the averaging grid ``tau`` and the coefficient grid ``h``.

    ``embedding_map[j]`` lists the tau-cells whose union is h-cell ``j``;
    ``owner[i]`` is the h-cell containing tau-cell ``i``.
    """

    sim: Grid
    tau: Grid
    h: Grid
    embedding_map: tuple = field(init=False, repr=False)
    owner: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.tau.n_cells < self.h.n_cells:
            raise ValueError("the tau grid must have at least as many cells as the h grid")
        emb = check_embedding(self.h, self.tau)
        owner = np.empty(self.tau.n_cells, dtype=int)
        for j, cells in enumerate(emb):
            owner[cells] = j
        owner.setflags(write=False)
        object.__setattr__(self, "embedding_map", tuple(tuple(c) for c in emb))
        object.__setattr__(self, "owner", owner)

    @classmethod
    def uniform(cls, n_sim: int, n_tau: int, n_h: int) -> "GridTriple":
        return cls(uniform_grid(n_sim), uniform_grid(n_tau), uniform_grid(n_h))


def uniform_grid(n: int) -> Grid:
    if int(n) != n or n < 1:
        raise ValueError(f"number of cells must be a positive integer, got {n!r}")
    n = int(n)
    bp = np.arange(n + 1, dtype=float) / n
    return Grid(n, bp)


def check_embedding(coarse: Grid, fine: Grid, tol: float | None = None) -> list[list[int]]:
    """Map each coarse cell to the contiguous run of fine cells covering it.

    Raises :class:`EmbeddingError` naming the first coarse breakpoint that
    does not coincide with a fine breakpoint.
    """
    if tol is None:
        tol = 1e-12 * min(coarse.widths.min(), fine.widths.min())
    fbp = fine.breakpoints
    cut = [0]
    for k in range(1, coarse.n_cells):
        x = coarse.breakpoints[k]
        j = int(np.argmin(np.abs(fbp - x)))
        if abs(fbp[j] - x) > tol:
            raise EmbeddingError(float(x), k)
        cut.append(j)
    cut.append(fine.n_cells)
    return [list(range(cut[k], cut[k + 1])) for k in range(coarse.n_cells)]


def merged_breakpoints(*grids: Grid, tol: float = 1e-13) -> np.ndarray:
    """Sorted union of the breakpoints of several grids, near-duplicates removed."""
    pts = np.sort(np.concatenate([g.breakpoints for g in grids]))
    keep = np.concatenate([[True], np.diff(pts) > tol])
    pts = pts[keep]
    pts[0], pts[-1] = 0.0, 1.0
    return pts


def overlap_pieces(*grids: Grid):
    """Common refinement of several grids.

    Returns ``(left, right, cells)`` where ``cells[k]`` holds, per piece,
    the index of the containing cell of ``grids[k]``.
    """
    pts = merged_breakpoints(*grids)
    left, right = pts[:-1], pts[1:]
    mid = 0.5 * (left + right)
    return left, right, [g.locate(mid) for g in grids]


def cell_average_weights(tau: Grid, sim: Grid) -> sp.csr_matrix:
    """Rows ``a_i`` with ``a_i @ u`` the exact mean over tau-cell ``i`` of the
    continuous piecewise-linear interpolant of nodal values ``u`` on ``sim``.

    The matrix has ``sim.n_cells + 1`` columns (boundary nodes included).
    """
    left, right, (ti, ei) = overlap_pieces(tau, sim)
    bp = sim.breakpoints
    xl, xr = bp[ei], bp[ei + 1]
    he = xr - xl
    # trapezoid on a piece of one element is exact for linear u
    length = right - left
    mid = 0.5 * (left + right)
    w_right = length * (mid - xl) / he  # integral of the right hat
    w_left = length - w_right
    rows = np.concatenate([ti, ti])
    cols = np.concatenate([ei, ei + 1])
    vals = np.concatenate([w_left, w_right]) / tau.widths[rows]
    return sp.csr_matrix((vals, (rows, cols)), shape=(tau.n_cells, sim.n_cells + 1))


def projection_matrix(source: Grid, target: Grid) -> sp.csr_matrix:
    """L2 projection of piecewise constants on ``source`` onto ``target``."""
    left, right, (si, ti) = overlap_pieces(source, target)
    vals = (right - left) / target.widths[ti]
    return sp.csr_matrix((vals, (ti, si)), shape=(target.n_cells, source.n_cells))


def project_pc(w: CellField, target: Grid) -> CellField:
    if w.grid == target:
        return w
    return CellField(target, projection_matrix(w.grid, target) @ w.values)


def tv_seminorm(w) -> float:
    """Total variation of a piecewise-constant field: sum of jumps."""
    values = w.values if isinstance(w, CellField) else np.asarray(w, dtype=float)
    return float(np.abs(np.diff(values)).sum())
