"""Experiment driver: synthetic data, the three initialization variants, CSV output.

Variants per noise level:

* ``O`` tighten the state bounds by OBBT, solve the relaxation, start the
  local solver from its coefficient;
* ``P`` solve the relaxation under the conservative bounds and start from it;
* ``N`` start from the constant coefficient 0.5.

Configuration files are INI files with the sections and keys below (all
optional; defaults in parentheses)::

    [experiment]
    n_sim = 1024
    deltas = 1e-1, 1e-2, 1e-3, 1e-4, 1e-5
    s = 1
    noise_factor = 1.1
    seed = 0
    delta_star = 1e-3
    out_dir = results

    [obbt]
    max_rounds = 50
    rel_improvement_tol = 1e-3
    initial_u_bound = 1e3
    lp_tol = 1e-9
    margin = 1e-9

    [optimizer]
    memory = 10
    grad_tol =            (empty: 1e-10 * (1 + |f(w0)|))
    max_iters = 500
    c1 = 1e-4
    backtrack = 0.5
    max_backtracks = 50
"""

from __future__ import annotations

import configparser
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import fem
from .balance import BalanceChoice, choose_grids
from .fem import NodalField, ProblemData
from .localopt import BoxQnConfig, reconstruct
from .mesh import CellField, GridTriple, uniform_grid
from .obbt import ObbtConfig, ObbtReport, run_obbt
from .relax import BoundsProfile, RelaxationSolution, build_relaxation, solve_relaxation

log = logging.getLogger(__name__)

VARIANTS = ("O", "P", "N")
RESULTS_HEADER = ["delta", "init", "eps_vs_zero", "eps_vs_mcc", "recon_err", "noise_measured"]
GRIDS_HEADER = ["delta", "h", "N_h", "tau", "N_tau", "noise_measured"]
RUNTIMES_HEADER = ["delta", "init", "N_h", "N_tau", "t_obbt", "t_relax", "t_local", "t_total",
                   "obbt_rounds", "obbt_lps", "obbt_volume", "m_mcc", "m_own", "failed_stage"]
RATE_HEADER = ["delta", "err_O", "err_P", "err_N", "reference"]
# eps below -BOUND_TOL flags a bound violation (10x the default kernel tolerance)
BOUND_TOL = 1e-7


@dataclass(frozen=True)
class ExperimentConfig:
    n_sim: int = 1024
    deltas: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    s: float = 1.0
    noise_factor: float = 1.1
    seed: int = 0
    delta_star: float = 1e-3
    out_dir: str = "results"
    obbt: ObbtConfig = field(default_factory=ObbtConfig)
    optimizer: BoxQnConfig = field(default_factory=BoxQnConfig)

    def __post_init__(self):
        deltas = tuple(float(d) for d in self.deltas)
        object.__setattr__(self, "deltas", deltas)
        if self.n_sim < 2 or self.s <= 0 or self.noise_factor <= 0 or self.delta_star <= 0:
            raise ValueError("experiment parameters must be positive")
        if not deltas or any(d <= 0 for d in deltas):
            raise ValueError("noise levels must be positive")
        if list(deltas) != sorted(deltas, reverse=True):
            raise ValueError("noise levels must be sorted in descending order")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def initial_u_bound(self) -> float:
        return self.obbt.initial_u_bound

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_parser(cp, **overrides)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, **overrides) -> "ExperimentConfig":
        known = {"experiment", "obbt", "optimizer"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw: dict = {}
        if cp.has_section("experiment"):
            sec = cp["experiment"]
            _check_keys(sec, {"n_sim", "deltas", "s", "noise_factor", "seed", "delta_star", "out_dir"})
            if "n_sim" in sec:
                kw["n_sim"] = sec.getint("n_sim")
            if "deltas" in sec:
                kw["deltas"] = tuple(float(v) for v in sec["deltas"].replace(";", ",").split(",") if v.strip())
            for key in ("s", "noise_factor", "delta_star"):
                if key in sec:
                    kw[key] = sec.getfloat(key)
            if "seed" in sec:
                kw["seed"] = int(sec["seed"])
            if "out_dir" in sec:
                kw["out_dir"] = sec["out_dir"]
        if cp.has_section("obbt"):
            sec = cp["obbt"]
            _check_keys(sec, {"max_rounds", "rel_improvement_tol", "initial_u_bound", "lp_tol", "margin"})
            okw = {k: (sec.getint(k) if k == "max_rounds" else sec.getfloat(k)) for k in sec}
            kw["obbt"] = ObbtConfig(**okw)
        if cp.has_section("optimizer"):
            sec = cp["optimizer"]
            _check_keys(sec, {"memory", "grad_tol", "max_iters", "c1", "backtrack", "max_backtracks"})
            qkw: dict = {}
            for k in sec:
                if k in ("memory", "max_iters", "max_backtracks"):
                    qkw[k] = sec.getint(k)
                elif k == "grad_tol":
                    qkw[k] = float(sec[k]) if sec[k].strip() else None
                else:
                    qkw[k] = sec.getfloat(k)
            kw["optimizer"] = BoxQnConfig(**qkw)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


def _check_keys(section, allowed):
    extra = set(section.keys()) - allowed
    if extra:
        raise ValueError(f"unknown keys in [{section.name}]: {sorted(extra)}")


# -- data ---------------------------------------------------------------------


def synthesize_truth(cfg: ExperimentConfig, pd: ProblemData | None = None):
    """Continuous true coefficient and its finite element state on the simulation grid."""
    pd = ProblemData.benchmark() if pd is None else pd
    sim = uniform_grid(cfg.n_sim)
    return fem.truth_coefficient, fem.solve_state(pd, fem.truth_coefficient, sim)


def _stream(seed: int, delta: float) -> np.random.Generator:
    # PCG64 keyed by the seed and the bit pattern of delta
    key = int(np.float64(delta).view(np.uint64))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def add_noise(y: NodalField, delta: float, seed: int, factor: float = 1.1) -> tuple[NodalField, float]:
    """Gaussian perturbation (std ``factor * delta``) of the interior nodal values."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    rng = _stream(seed, delta)
    vals = y.values.copy()
    vals[1:-1] += factor * delta * rng.standard_normal(vals.size - 2)
    yd = NodalField(y.grid, vals)
    return yd, fem.misfit(y, yd)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)


def reconstruction_error(w_true: Callable, w: CellField, refine: int = 1) -> float:
    """L2(0, 1) distance between a smooth function and a piecewise constant.

    Each cell (split into ``refine`` equal parts) is integrated with a
    20-point Gauss rule.
    """
    edges = w.grid.breakpoints
    if refine > 1:
        t = np.linspace(0.0, 1.0, refine + 1)
        edges = np.unique(np.concatenate([a + (b - a) * t for a, b in zip(edges[:-1], edges[1:])]))
    a, b = edges[:-1], edges[1:]
    x = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * _GL_X[None, :]
    wts = 0.5 * (b - a)[:, None] * _GL_W[None, :]
    vals = w(0.5 * (a + b))[:, None]
    return float(np.sqrt(((w_true(x) - vals) ** 2 * wts).sum()))


# -- variants -----------------------------------------------------------------


@dataclass
class RunRecord:
    delta: float
    init: str
    N_h: int
    N_tau: int
    noise_measured: float
    eps_vs_zero: float = np.nan
    eps_vs_mcc: float = np.nan
    recon_err: float = np.nan
    objective: float = np.nan  # 0.5 * misfit^2 of the local solution
    m_mcc: float = np.nan  # unsquared relaxation value used as lower bound
    m_own: float = np.nan  # relaxation value of this variant's own start (O: after OBBT, P: before)
    t_obbt: float = 0.0
    t_relax: float = 0.0
    t_local: float = 0.0
    obbt_rounds: int = 0
    obbt_lps: int = 0
    obbt_volume: float = np.nan
    failed_stage: str = ""
    w: np.ndarray | None = field(default=None, repr=False)

    @property
    def t_total(self) -> float:
        return self.t_obbt + self.t_relax + self.t_local


@dataclass
class _Context:
    """Shared per-delta state: data, grids and relaxation results."""

    cfg: ExperimentConfig
    pd: ProblemData
    grids: BalanceChoice
    triple: GridTriple
    y: NodalField
    measured: float
    w_true: Callable
    relax: dict = field(default_factory=dict)  # init tag -> (solution, seconds, report)


def _conservative(ctx: _Context) -> BoundsProfile:
    return BoundsProfile.conservative(ctx.pd, ctx.triple, ctx.cfg.initial_u_bound)


def _relaxation(ctx: _Context, init: str) -> tuple[RelaxationSolution, float, ObbtReport | None]:
    if init in ctx.relax:
        return ctx.relax[init]
    model = build_relaxation(ctx.pd, ctx.triple, _conservative(ctx), ctx.y)
    report = None
    if init == "O":
        profile, report = run_obbt(model, cfg=ctx.cfg.obbt)
        model = model.with_profile(profile)
    t0 = time.perf_counter()
    sol = solve_relaxation(model)
    out = (sol, time.perf_counter() - t0, report)
    ctx.relax[init] = out
    return out


def run_variant(ctx: _Context, init: str) -> RunRecord:
    """One initialization variant; a failing stage is recorded, not raised."""
    if init not in VARIANTS:
        raise ValueError(f"unknown initialization {init!r}")
    g = ctx.grids
    rec = RunRecord(ctx.grids.delta, init, g.N_h, g.N_tau, ctx.measured)
    stage = "relax"
    try:
        if init == "N":
            w0 = np.full(g.N_h, 0.5)
        else:
            stage = "obbt" if init == "O" else "relax"
            sol, t_relax, report = _relaxation(ctx, init)
            rec.t_relax = t_relax
            rec.m_own = sol.value
            if report is not None:
                rec.t_obbt = report.wall_time
                rec.obbt_rounds = report.rounds
                rec.obbt_lps = report.lp_count
                rec.obbt_volume = report.volumes[-1]
            w0 = np.clip(sol.w.values, ctx.pd.w_lo, ctx.pd.w_hi)
        stage = "local"
        t0 = time.perf_counter()
        rc = reconstruct(ctx.pd, ctx.triple, ctx.y, CellField(ctx.triple.h, w0), ctx.cfg.optimizer)
        rec.t_local = time.perf_counter() - t0
        rec.objective = rc.objective
        rec.recon_err = reconstruction_error(ctx.w_true, rc.w)
        rec.w = rc.w.values.copy()
        stage = "bound"
        # the tightest lower bound available at this noise level
        lb_sol = _relaxation(ctx, "O")[0]
        rec.m_mcc = lb_sol.value
        rec.eps_vs_zero = rec.objective
        rec.eps_vs_mcc = rec.objective - lb_sol.qp_optimum
        if rec.eps_vs_mcc < -BOUND_TOL:
            log.warning("delta=%g %s: lower bound exceeds objective by %.3g", rec.delta, init, -rec.eps_vs_mcc)
    except Exception as exc:
        log.error("delta=%g variant %s failed in stage %s: %s", rec.delta, init, stage, exc)
        rec.failed_stage = stage
    return rec


def make_context(cfg: ExperimentConfig, delta: float, grids: BalanceChoice | None = None,
                 pd: ProblemData | None = None) -> _Context:
    pd = ProblemData.benchmark() if pd is None else pd
    grids = choose_grids(delta, cfg.s) if grids is None else replace(grids, delta=delta)
    w_true, y_true = synthesize_truth(cfg, pd)
    y, measured = add_noise(y_true, delta, cfg.seed, cfg.noise_factor)
    return _Context(cfg, pd, grids, grids.triple(cfg.n_sim), y, measured, w_true)


# -- sweeps -------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.4g}" if v == v else "nan"


def _fmt_full(v) -> str:
    if isinstance(v, (int, np.integer, str)):
        return str(v)
    return repr(float(v))


class _Writer:
    """CSV files flushed after every noise level."""

    def __init__(self, out: Path, prefix: str = ""):
        out.mkdir(parents=True, exist_ok=True)
        self.paths = {k: out / f"{prefix}{k}.csv" for k in ("grids", "results", "runtimes", "rate")}
        self.rows: dict[str, list] = {k: [] for k in self.paths}
        self.headers = {"grids": GRIDS_HEADER, "results": RESULTS_HEADER,
                        "runtimes": RUNTIMES_HEADER, "rate": RATE_HEADER}

    def add(self, ctx: _Context, records: list[RunRecord]):
        g = ctx.grids
        self.rows["grids"].append([_fmt_full(g.delta), _fmt_full(g.h), g.N_h, _fmt_full(g.tau), g.N_tau,
                                   _fmt_full(ctx.measured)])
        errs = {}
        for r in records:
            self.rows["results"].append([_fmt_full(r.delta), r.init, _fmt_full(r.eps_vs_zero),
                                         _fmt_full(r.eps_vs_mcc), _fmt_full(r.recon_err),
                                         _fmt_full(r.noise_measured)])
            self.rows["runtimes"].append([_fmt_full(r.delta), r.init, r.N_h, r.N_tau, _fmt(r.t_obbt),
                                          _fmt(r.t_relax), _fmt(r.t_local), _fmt(r.t_total), r.obbt_rounds,
                                          r.obbt_lps, _fmt_full(r.obbt_volume), _fmt_full(r.m_mcc), _fmt_full(r.m_own),
                                          r.failed_stage])
            errs[r.init] = r.recon_err
        self.rows["rate"].append([_fmt_full(g.delta)] + [_fmt_full(errs.get(v, np.nan)) for v in VARIANTS]
                                 + [_fmt_full(g.delta ** (1.0 / (1.0 + 4.0 * g.s)))])
        self.flush()

    def flush(self):
        for key, path in self.paths.items():
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh)  # RFC 4180: comma separated, CRLF line ends
                wr.writerow(self.headers[key])
                wr.writerows(self.rows[key])


def _sweep(cfg: ExperimentConfig, grids_for: Callable[[float], BalanceChoice], prefix: str,
           out_dir: str | Path | None, pd: ProblemData | None) -> list[RunRecord]:
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    writer = _Writer(out, prefix)
    records: list[RunRecord] = []
    for delta in cfg.deltas:
        ctx = make_context(cfg, delta, grids_for(delta), pd)
        block = [run_variant(ctx, v) for v in VARIANTS]
        for r in block:
            log.info("delta=%g %s: err %.4g eps %.4g (N_h=%d)", delta, r.init, r.recon_err, r.eps_vs_zero, r.N_h)
        records.extend(block)
        writer.add(ctx, block)
    return records


def run_sweep(cfg: ExperimentConfig, out_dir=None, pd: ProblemData | None = None) -> list[RunRecord]:
    """Balanced grids per noise level; writes grids.csv, results.csv, runtimes.csv, rate.csv."""
    return _sweep(cfg, lambda d: choose_grids(d, cfg.s), "", out_dir, pd)


def run_fixed_grid_sweep(cfg: ExperimentConfig, delta_star: float | None = None, out_dir=None,
                         pd: ProblemData | None = None) -> list[RunRecord]:
    """Grids chosen once for ``delta_star`` and reused for every noise level (``fixed_*.csv``)."""
    ds = cfg.delta_star if delta_star is None else delta_star
    if not min(cfg.deltas) <= ds <= max(cfg.deltas):
        raise ValueError("delta_star must lie within the configured noise levels")
    fixed = choose_grids(ds, cfg.s)
    return _sweep(cfg, lambda d: fixed, "fixed_", out_dir, pd)
