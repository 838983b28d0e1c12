"""Command line entry point (``mccinv``)."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path


from . import fem
from .balance import choose_grids
from .fem import ProblemData
from .harness import (VARIANTS, ExperimentConfig, make_context, run_fixed_grid_sweep,
                      run_sweep, run_variant, synthesize_truth)
from .mesh import CellField, uniform_grid
from .obbt import run_obbt
from .relax import BoundsProfile, build_relaxation, solve_relaxation


def _num(v) -> str:
    return repr(float(v))


def _write(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    print(path)


def _config(args) -> ExperimentConfig:
    over = {"seed": args.seed, "out_dir": args.out}
    if args.config:
        return ExperimentConfig.from_file(args.config, **over)
    return ExperimentConfig(**{k: v for k, v in over.items() if v is not None})


def cmd_solve_state(args, cfg):
    pd = ProblemData.benchmark()
    sim = uniform_grid(cfg.n_sim)
    w = fem.truth_coefficient if args.w == "truth" else CellField(uniform_grid(1), [float(args.w)])
    u = fem.solve_state(pd, w, sim)
    x = sim.breakpoints
    _write(Path(cfg.out_dir) / "state.csv", ["x", "u"], [[_num(a), _num(b)] for a, b in zip(x, u.values)])


def cmd_relax(args, cfg):
    ctx = make_context(cfg, args.delta)
    model = build_relaxation(ctx.pd, ctx.triple, BoundsProfile.conservative(ctx.pd, ctx.triple,
                                                                             cfg.initial_u_bound), ctx.y)
    if args.obbt:
        profile, _ = run_obbt(model, cfg=cfg.obbt)
        model = model.with_profile(profile)
    sol = solve_relaxation(model)
    edges = ctx.triple.h.breakpoints
    _write(Path(cfg.out_dir) / "relax.csv", ["x_left", "x_right", "w"],
           [[_num(a), _num(b), _num(v)] for a, b, v in zip(edges[:-1], edges[1:], sol.w.values)])
    _write(Path(cfg.out_dir) / "relax_summary.csv", ["delta", "N_h", "N_tau", "m_mcc", "qp_optimum", "status"],
           [[_num(args.delta), ctx.grids.N_h, ctx.grids.N_tau, _num(sol.value), _num(sol.qp_optimum),
             sol.status.value]])


def cmd_obbt(args, cfg):
    pd = ProblemData.benchmark()
    grids = choose_grids(args.delta, cfg.s)
    triple = grids.triple(cfg.n_sim)
    _, y = synthesize_truth(cfg, pd)
    model = build_relaxation(pd, triple, BoundsProfile.conservative(pd, triple, cfg.initial_u_bound), y)
    profile, rep = run_obbt(model, cfg=cfg.obbt)
    out = Path(cfg.out_dir)
    _write(out / "obbt_bounds.csv", ["cell", "u_lo", "u_hi", "z_lo", "z_hi"],
           [[i, _num(a), _num(b), _num(c), _num(d)] for i, (a, b, c, d) in
            enumerate(zip(profile.u_lo, profile.u_hi, profile.z_lo, profile.z_hi))])
    _write(out / "obbt_rounds.csv", ["round", "volume"], [[i, _num(v)] for i, v in enumerate(rep.volumes)])
    print(f"{rep.rounds} rounds, {rep.lp_count} LPs, {rep.wall_time:.4g} s ({rep.stop_reason})")


def cmd_reconstruct(args, cfg):
    ctx = make_context(cfg, args.delta)
    rec = run_variant(ctx, args.init)
    if rec.failed_stage:
        print(f"failed in stage {rec.failed_stage}", file=sys.stderr)
        return 1
    edges = ctx.triple.h.breakpoints
    _write(Path(cfg.out_dir) / f"reconstruction_{args.init}.csv", ["x_left", "x_right", "w"],
           [[_num(a), _num(b), _num(v)] for a, b, v in zip(edges[:-1], edges[1:], rec.w)])
    print(f"recon_err={rec.recon_err:.4g} eps_vs_zero={rec.eps_vs_zero:.4g} eps_vs_mcc={rec.eps_vs_mcc:.4g}")
    return 0


def cmd_sweep(args, cfg):
    run_sweep(cfg)
    print(Path(cfg.out_dir).resolve())


def cmd_fixed_sweep(args, cfg):
    run_fixed_grid_sweep(cfg, args.delta_star)
    print(Path(cfg.out_dir).resolve())


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=default, help="INI configuration file")
        g.add_argument("--seed", type=int, default=default, help="unsigned 64-bit noise seed")
        g.add_argument("--out", default=default, help="output directory")
        g.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return g

    # flags may appear before or after the subcommand; the subcommand copy
    # must not overwrite values given before it
    common = global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="mccinv", parents=[global_flags(None)],
                                description="Coefficient identification with McCormick relaxations.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve-state", parents=[common], help="solve the state equation")
    s.add_argument("--w", default="truth", help="'truth' or a constant coefficient value")
    s.set_defaults(func=cmd_solve_state)
    s = sub.add_parser("relax", parents=[common], help="solve the relaxation for one noise level")
    s.add_argument("--delta", type=float, default=1e-3)
    s.add_argument("--obbt", action="store_true", help="tighten the bounds first")
    s.set_defaults(func=cmd_relax)
    s = sub.add_parser("obbt", parents=[common], help="bound tightening on the balanced grids")
    s.add_argument("--delta", type=float, default=1e-3)
    s.set_defaults(func=cmd_obbt)
    s = sub.add_parser("reconstruct", parents=[common], help="one initialization variant")
    s.add_argument("--delta", type=float, default=1e-3)
    s.add_argument("--init", choices=VARIANTS, default="O")
    s.set_defaults(func=cmd_reconstruct)
    s = sub.add_parser("sweep", parents=[common], help="balanced sweep over all noise levels")
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("fixed-sweep", parents=[common], help="sweep with grids frozen at delta_star")
    s.add_argument("--delta-star", type=float, default=None)
    s.set_defaults(func=cmd_fixed_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    return int(args.func(args, cfg) or 0)


if __name__ == "__main__":
    sys.exit(main())
