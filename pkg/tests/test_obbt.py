import numpy as np
import pytest

from mccinv import fem
from mccinv.fem import ProblemData
from mccinv.mesh import CellField, GridTriple
from mccinv.obbt import ObbtConfig, obbt_round, run_obbt, tighten_cell
from mccinv.relax import BoundsProfile, build_relaxation, solve_relaxation


def toy():
    pd = ProblemData.constant(1.0, 1.0)
    t = GridTriple.uniform(4, 1, 1)
    y = fem.solve_state(pd, CellField(t.h, [0.5]), t.sim)
    return pd, t, build_relaxation(pd, t, BoundsProfile.conservative(pd, t), y)


def test_toy_bounds_enclose_brute_force_range():
    pd, t, m = toy()
    avgs = [m.cell_means(fem.solve_state_averaged(pd, CellField(t.h, [w]), t))[0]
            for w in np.linspace(0, 1, 1000)]
    assert tighten_cell(m, 0, "min") <= min(avgs) + 1e-12
    assert tighten_cell(m, 0, "max") >= max(avgs) - 1e-12


def test_point_boxes_return_the_feasible_average():
    pd = ProblemData.benchmark()
    t = GridTriple.uniform(32, 4, 2)
    w = CellField(t.h, [0.3, 0.8])
    u = fem.solve_state_averaged(pd, w, t)
    m0 = build_relaxation(pd, t, BoundsProfile.conservative(pd, t), u)
    ubar = m0.cell_means(u)
    m = m0.with_profile(BoundsProfile.from_state_bounds(ubar, ubar, w.values, w.values, t.owner))
    for i in range(4):
        assert tighten_cell(m, i, "min") == pytest.approx(ubar[i], abs=1e-9)
        assert tighten_cell(m, i, "max") == pytest.approx(ubar[i], abs=1e-9)


def test_wider_product_boxes_never_tighten():
    pd, t, m = toy()
    p = m.profile
    wide = BoundsProfile(p.u_lo, p.u_hi, p.w_lo, p.w_hi, p.z_lo - 5, p.z_hi + 5, p.owner)
    mw = m.with_profile(wide)
    assert tighten_cell(mw, 0, "min") <= tighten_cell(m, 0, "min") + 1e-12
    assert tighten_cell(mw, 0, "max") >= tighten_cell(m, 0, "max") - 1e-12


def test_bad_direction():
    _, _, m = toy()
    with pytest.raises(ValueError):
        tighten_cell(m, 0, "up")


@pytest.fixture(scope="module")
def benchmark_model():
    pd = ProblemData.benchmark()
    t = GridTriple.uniform(1024, 7, 7)
    y = fem.solve_state(pd, fem.truth_coefficient, t.sim)
    return pd, t, build_relaxation(pd, t, BoundsProfile.conservative(pd, t), y)


def test_one_round_shrinks_and_keeps_relaxation_solution(benchmark_model):
    _, _, m = benchmark_model
    sol = solve_relaxation(m)
    new, count = obbt_round(m)
    assert count == 2 * 7
    assert np.all(np.abs(new.u_lo) < 1e3) and np.all(np.abs(new.u_hi) < 1e3)
    ubar = m.cell_means(sol.u)
    assert np.all(new.u_lo <= ubar + 1e-9) and np.all(ubar <= new.u_hi + 1e-9)


def test_lifted_points_survive_rounds(benchmark_model):
    pd, t, m = benchmark_model
    prof, _ = run_obbt(m, cfg=ObbtConfig(max_rounds=4), use_cache=False)
    m2 = m.with_profile(prof)
    rng = np.random.default_rng(0)
    for _ in range(20):
        w = CellField(t.h, rng.uniform(size=7))
        u = fem.solve_state_averaged(pd, w, t)
        assert m2.residual(u, w, m2.lift(u, w)).value <= 1e-9


def test_fixpoint_is_idempotent(benchmark_model):
    _, _, m = benchmark_model
    prof, rep = run_obbt(m, cfg=ObbtConfig(max_rounds=60, rel_improvement_tol=1e-12, margin=0.0),
                         use_cache=False)
    again, _ = obbt_round(m.with_profile(prof), margin=0.0)
    np.testing.assert_allclose(again.u_lo, prof.u_lo, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(again.u_hi, prof.u_hi, rtol=1e-8, atol=1e-10)


def test_report_counts_and_monotone_volume(benchmark_model):
    _, _, m = benchmark_model
    prof, rep = run_obbt(m, cfg=ObbtConfig(max_rounds=1), use_cache=False)
    assert rep.rounds == 1 and rep.lp_count == 14
    prof, rep = run_obbt(m, cfg=ObbtConfig(), use_cache=False)
    assert rep.lp_count == 2 * 7 * rep.rounds
    assert all(b <= a for a, b in zip(rep.volumes, rep.volumes[1:]))
    assert rep.stop_reason == "converged"


def test_bounds_monotone_per_cell(benchmark_model):
    _, _, m = benchmark_model
    prof = m.profile
    for _ in range(3):
        new, _ = obbt_round(m.with_profile(prof))
        assert np.all(new.u_lo >= prof.u_lo) and np.all(new.u_hi <= prof.u_hi)
        prof = new


def test_tightening_raises_relaxation_value():
    pd = ProblemData.benchmark()
    from mccinv.balance import choose_grids
    from mccinv.harness import ExperimentConfig, add_noise, synthesize_truth
    cfg = ExperimentConfig(seed=0)
    t = choose_grids(1e-3).triple(1024)
    _, y_true = synthesize_truth(cfg, pd)
    y, _ = add_noise(y_true, 1e-3, 0)
    m = build_relaxation(pd, t, BoundsProfile.conservative(pd, t), y)
    pre = solve_relaxation(m).value
    prof, _ = run_obbt(m)
    post = solve_relaxation(m.with_profile(prof)).value
    assert post >= pre - 1e-10


def test_cache_returns_same_profile(benchmark_model):
    _, _, m = benchmark_model
    a, ra = run_obbt(m, cfg=ObbtConfig(max_rounds=2))
    b, rb = run_obbt(m, cfg=ObbtConfig(max_rounds=2))
    np.testing.assert_array_equal(a.u_lo, b.u_lo)
    assert ra.lp_count == rb.lp_count


@pytest.mark.parametrize("kw", [dict(max_rounds=0), dict(rel_improvement_tol=0.0), dict(lp_tol=-1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ObbtConfig(**kw)
