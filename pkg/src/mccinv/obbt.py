"""Optimization-based bound tightening of the tau-cell state bounds.

Each round solves ``min`` and ``max`` of every tau-cell mean ``a_i.u`` over
the current relaxation (quadratic objective dropped).  All LPs of a round
see the round-entry profile; the new bounds are intersected with the old
ones at the end of the round.  The LPs do not involve the data, so results
are memoized per (problem, grids, start profile, config).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .convex import Status, solve_lp
from .relax import BoundsInconsistentError, BoundsProfile, RelaxationModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObbtConfig:
    """Round policy for :func:`run_obbt`.

    The run stops once no bound of a round shrinks by more than
    ``rel_improvement_tol`` relative to its cell width, or after
    ``max_rounds`` rounds.  ``margin`` widens every new bound outward by
    ``margin * (1 + |b|)`` to absorb LP round-off.
    """

    max_rounds: int = 50
    rel_improvement_tol: float = 1e-3
    initial_u_bound: float = 1e3
    lp_tol: float = 1e-9
    margin: float = 1e-9

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if min(self.rel_improvement_tol, self.initial_u_bound, self.lp_tol) <= 0 or self.margin < 0:
            raise ValueError("OBBT tolerances must be positive")


@dataclass
class ObbtReport:
    rounds: int = 0
    volumes: list[float] = field(default_factory=list)  # entry volume, then one per round
    lp_count: int = 0
    wall_time: float = 0.0
    stop_reason: str = ""


def tighten_cell(model: RelaxationModel, i: int, direction: str, tol: float = 1e-9,
                 warm: dict | None = None) -> float:
    """Minimum (``"min"``) or maximum (``"max"``) of the tau-cell mean ``i`` over the relaxation.

    An unbounded LP returns the current bound with a warning.  ``warm`` maps
    a direction to the last optimal basis; it is read and updated in place.
    """
    if direction not in ("min", "max"):
        raise ValueError("direction must be 'min' or 'max'")
    sense = 1.0 if direction == "min" else -1.0
    start = None if warm is None else warm.get(direction)
    res = solve_lp(model.averages_lp(i, sense), tol=tol, warm=start)
    if warm is not None and res.basis is not None:
        warm[direction] = res.basis
    current = model.profile.u_lo[i] if direction == "min" else model.profile.u_hi[i]
    if res.status is Status.INFEASIBLE:
        raise BoundsInconsistentError(f"bound LP for cell {i} is infeasible", res)
    if res.status is Status.UNBOUNDED:
        log.warning("bound LP for cell %d (%s) is unbounded; keeping %g", i, direction, current)
        return float(current)
    if res.status is not Status.OPTIMAL:
        log.warning("bound LP for cell %d (%s) stopped early; keeping %g", i, direction, current)
        return float(current)
    return float(model.base.c[i] + sense * res.objective)


def obbt_round(model: RelaxationModel, profile: BoundsProfile | None = None,
               margin: float = 1e-9, tol: float = 1e-9) -> tuple[BoundsProfile, int]:
    """One Jacobi round over all tau-cells; returns the new profile and the LP count.

    If a cell LP is infeasible the round is abandoned and the entry profile
    is returned unchanged (the error is logged).
    """
    if profile is not None and profile is not model.profile:
        model = model.with_profile(profile)
    prof = model.profile
    lo, hi = prof.u_lo.copy(), prof.u_hi.copy()
    count = 0
    # every LP of the round shares the constraints, so each one starts
    # from the previous optimal basis of the same direction
    warm: dict = {}
    try:
        for direction, out in (("min", lo), ("max", hi)):
            for i in range(prof.n_tau):
                count += 1
                out[i] = tighten_cell(model, i, direction, tol, warm)
    except BoundsInconsistentError as exc:
        log.error("OBBT round aborted: %s", exc)
        return prof, count
    lo -= margin * (1.0 + np.abs(lo))
    hi += margin * (1.0 + np.abs(hi))
    new_lo = np.maximum(prof.u_lo, lo)
    new_hi = np.minimum(prof.u_hi, hi)
    # a cell whose bounds cross by round-off collapses to their midpoint
    cross = new_lo > new_hi
    mid = 0.5 * (new_lo + new_hi)
    new_lo[cross] = mid[cross]
    new_hi[cross] = mid[cross]
    return prof.with_state_bounds(new_lo, new_hi), count


_CACHE: dict = {}


def _key(model: RelaxationModel, cfg: ObbtConfig):
    p = model.profile
    pd = model.pd
    return (id(pd), model.triple.sim, model.triple.tau, model.triple.h, cfg,
            p.u_lo.tobytes(), p.u_hi.tobytes(), p.w_lo.tobytes(), p.w_hi.tobytes())


def clear_cache() -> None:
    _CACHE.clear()


def run_obbt(model: RelaxationModel, profile: BoundsProfile | None = None,
             cfg: ObbtConfig = ObbtConfig(), use_cache: bool = True) -> tuple[BoundsProfile, ObbtReport]:
    """Repeat :func:`obbt_round` until the bounds stop shrinking or ``max_rounds`` is hit."""
    if profile is not None and profile is not model.profile:
        model = model.with_profile(profile)
    key = _key(model, cfg)
    if use_cache and key in _CACHE and _CACHE[key][0] is model.pd:
        prof, rep = _CACHE[key][1]
        return prof, ObbtReport(rep.rounds, list(rep.volumes), rep.lp_count, rep.wall_time, rep.stop_reason)

    t0 = time.perf_counter()
    report = ObbtReport(volumes=[model.profile.volume()])
    prof = model.profile
    report.stop_reason = "max_rounds"
    for _ in range(cfg.max_rounds):
        new, count = obbt_round(model, margin=cfg.margin, tol=cfg.lp_tol)
        report.lp_count += count
        report.rounds += 1
        if new is prof:
            report.volumes.append(prof.volume())
            report.stop_reason = "infeasible"
            break
        width = np.maximum(prof.u_hi - prof.u_lo, 1e-300)
        shrink = np.maximum(new.u_lo - prof.u_lo, prof.u_hi - new.u_hi) / width
        prof = new
        report.volumes.append(prof.volume())
        if shrink.max(initial=0.0) < cfg.rel_improvement_tol:
            report.stop_reason = "converged"
            break
        model = model.with_profile(prof)
    report.wall_time = time.perf_counter() - t0
    log.info("OBBT: %d rounds, %d LPs, volume %.4g -> %.4g, %.2fs (%s)", report.rounds, report.lp_count,
             report.volumes[0], report.volumes[-1], report.wall_time, report.stop_reason)
    if use_cache:
        if len(_CACHE) > 64:
            _CACHE.clear()
        _CACHE[key] = (model.pd, (prof, ObbtReport(report.rounds, list(report.volumes), report.lp_count,
                                                   report.wall_time, report.stop_reason)))
    return prof, report
