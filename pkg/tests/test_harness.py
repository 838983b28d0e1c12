import csv
import configparser

import numpy as np
import pytest

from mccinv import cli, fem
from mccinv.balance import choose_grids
from mccinv.fem import NodalField
from mccinv.harness import (GRIDS_HEADER, RATE_HEADER, RESULTS_HEADER, RUNTIMES_HEADER, ExperimentConfig,
                            add_noise, make_context, reconstruction_error, run_fixed_grid_sweep, run_sweep,
                            run_variant, synthesize_truth)
from mccinv.mesh import CellField, uniform_grid
from mccinv.obbt import ObbtConfig

SMALL = dict(deltas=(1e-1, 1e-2))


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_defaults_and_validation():
    c = ExperimentConfig()
    assert (c.n_sim, c.s, c.noise_factor, c.initial_u_bound) == (1024, 1.0, 1.1, 1e3)
    assert c.deltas == (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    for kw in (dict(deltas=(1e-2, 1e-1)), dict(deltas=()), dict(n_sim=0), dict(noise_factor=-1.0),
               dict(seed=-1), dict(seed=2**64)):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)


def test_config_from_ini(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[experiment]\nn_sim = 256\ndeltas = 1e-1, 1e-3\nseed = 7\n\n"
                 "[obbt]\nmax_rounds = 5\n\n[optimizer]\nmax_iters = 50\ngrad_tol =\n")
    c = ExperimentConfig.from_file(p, seed=9)
    assert (c.n_sim, c.deltas, c.seed) == (256, (1e-1, 1e-3), 9)
    assert c.obbt.max_rounds == 5 and c.optimizer.max_iters == 50 and c.optimizer.grad_tol is None


@pytest.mark.parametrize("text", ["[extra]\na = 1\n", "[experiment]\nnsim = 3\n", "[obbt]\nrounds = 2\n"])
def test_config_rejects_unknown_entries(text):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    with pytest.raises(ValueError):
        ExperimentConfig.from_parser(cp)


def test_truth_and_data():
    w, y = synthesize_truth(ExperimentConfig())
    np.testing.assert_allclose(w(np.array([0.0, 0.25, 0.5])), [1.0, 0.0, 1.0], atol=1e-15)
    assert y.values[0] == y.values[-1] == 0 and y.values.min() >= 0
    assert y.grid == uniform_grid(1024)


def test_noise_is_seeded_interior_and_scaled():
    _, y = synthesize_truth(ExperimentConfig())
    a, ma = add_noise(y, 1e-3, 5)
    b, mb = add_noise(y, 1e-3, 5)
    np.testing.assert_array_equal(a.values, b.values)
    assert ma == mb == pytest.approx(fem.misfit(y, a))
    assert a.values[0] == 0 and a.values[-1] == 0
    assert not np.array_equal(add_noise(y, 1e-3, 6)[0].values, a.values)
    # std of the interior perturbation is 1.1 delta; the L2 norm tracks it linearly
    for delta in (1e-1, 1e-3, 1e-5):
        _, m = add_noise(y, delta, 0)
        assert 0.8 < m / (1.1 * delta) < 1.2
    with pytest.raises(ValueError):
        add_noise(y, 0.0, 0)


def test_reconstruction_error_quadrature():
    w = CellField(uniform_grid(7), np.linspace(0, 1, 7))
    coarse = reconstruction_error(fem.truth_coefficient, w)
    fine = reconstruction_error(fem.truth_coefficient, w, refine=10)
    assert coarse == pytest.approx(fine, abs=1e-10)
    assert reconstruction_error(lambda x: np.full_like(x, 0.3), CellField(uniform_grid(3), [0.3] * 3)) == 0
    # |cos^2 - 1/2|^2 integrates to 1/8
    assert reconstruction_error(fem.truth_coefficient, CellField(uniform_grid(1), [0.5])) == \
        pytest.approx(np.sqrt(1 / 8), rel=1e-12)


def test_variants_at_coarse_noise_coincide():
    ctx = make_context(ExperimentConfig(), 1e-1)
    recs = {v: run_variant(ctx, v) for v in "OPN"}
    assert all(not r.failed_stage for r in recs.values())
    errs = [r.recon_err for r in recs.values()]
    assert max(errs) - min(errs) <= 1e-4
    o = recs["O"]
    assert o.obbt_lps == 2 * o.N_tau * o.obbt_rounds and o.t_obbt > 0
    for r in recs.values():
        assert r.eps_vs_zero <= 1e-1
        assert r.eps_vs_mcc == pytest.approx(r.eps_vs_zero - 0.5 * r.m_mcc ** 2, abs=1e-15)
        assert np.all((r.w >= 0) & (r.w <= 1))
    with pytest.raises(ValueError):
        run_variant(ctx, "X")


def test_stage_failure_is_recorded():
    # bounds too tight to contain any state: both relaxations are infeasible
    cfg = ExperimentConfig(obbt=ObbtConfig(initial_u_bound=1e-6))
    ctx = make_context(cfg, 1e-1)
    o, p, n = (run_variant(ctx, v) for v in "OPN")
    assert o.failed_stage == "obbt" and p.failed_stage == "relax"
    assert np.isfinite(n.recon_err) and n.failed_stage == "bound"


@pytest.fixture(scope="module")
def small_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = ExperimentConfig(**SMALL)
    return cfg, out, run_sweep(cfg, out_dir=out)


def test_sweep_csv_schema(small_sweep):
    cfg, out, recs = small_sweep
    assert len(recs) == 6
    for name, header in (("grids", GRIDS_HEADER), ("results", RESULTS_HEADER), ("runtimes", RUNTIMES_HEADER),
                         ("rate", RATE_HEADER)):
        rows = read(out / f"{name}.csv")
        assert rows[0] == header
        assert len(rows) - 1 == (2 if name in ("grids", "rate") else 6)
        assert (out / f"{name}.csv").read_bytes().count(b"\r\n") == len(rows)
    assert RESULTS_HEADER == "delta,init,eps_vs_zero,eps_vs_mcc,recon_err,noise_measured".split(",")
    assert [int(r[2]) for r in read(out / "grids.csv")[1:]] == [3, 7]
    rate = read(out / "rate.csv")[1:]
    assert float(rate[1][4]) == pytest.approx(1e-2 ** 0.2)


def test_sweep_is_reproducible(small_sweep, tmp_path):
    cfg, out, _ = small_sweep
    run_sweep(cfg, out_dir=tmp_path)
    for name in ("grids", "results", "rate"):
        assert (tmp_path / f"{name}.csv").read_bytes() == (out / f"{name}.csv").read_bytes()


def test_fixed_sweep_matches_balanced_at_delta_star(small_sweep, tmp_path):
    cfg, out, recs = small_sweep
    fixed = run_fixed_grid_sweep(cfg, delta_star=1e-2, out_dir=tmp_path)
    assert all(r.N_h == 7 for r in fixed)
    bal = {(r.delta, r.init): r for r in recs}
    for r in fixed:
        if r.delta == 1e-2:
            assert r.recon_err == bal[(r.delta, r.init)].recon_err
            assert r.eps_vs_zero == bal[(r.delta, r.init)].eps_vs_zero
    assert read(tmp_path / "fixed_results.csv")[0] == RESULTS_HEADER
    with pytest.raises(ValueError):
        run_fixed_grid_sweep(cfg, delta_star=1e-4, out_dir=tmp_path)


def test_partial_results_flushed(tmp_path, monkeypatch):
    from mccinv import harness
    real = harness.make_context

    def flaky(cfg, delta, *a, **k):
        if delta < 1e-1:
            raise RuntimeError("interrupted")
        return real(cfg, delta, *a, **k)
    monkeypatch.setattr(harness, "make_context", flaky)
    with pytest.raises(RuntimeError):
        run_sweep(ExperimentConfig(**SMALL), out_dir=tmp_path)
    assert len(read(tmp_path / "results.csv")) == 1 + 3


def test_cli_commands(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[experiment]\nn_sim = 128\ndeltas = 1e-1\n")
    base = ["--config", str(ini), "--out", str(tmp_path / "o")]
    assert cli.main(base + ["solve-state"]) == 0
    rows = read(tmp_path / "o" / "state.csv")
    assert rows[0] == ["x", "u"] and len(rows) == 130
    assert cli.main(["solve-state", "--w", "0.5"] + base) == 0
    assert cli.main(base + ["relax", "--delta", "1e-1", "--obbt"]) == 0
    assert read(tmp_path / "o" / "relax_summary.csv")[1][1] == "3"
    assert cli.main(base + ["obbt", "--delta", "1e-1"]) == 0
    assert cli.main(base + ["--seed", "3", "reconstruct", "--delta", "1e-1", "--init", "N"]) == 0
    assert "recon_err" in capsys.readouterr().out
    assert cli.main(base + ["sweep"]) == 0
    assert read(tmp_path / "o" / "results.csv")[0] == RESULTS_HEADER
    assert cli.main(base + ["fixed-sweep", "--delta-star", "1e-1"]) == 0
    assert (tmp_path / "o" / "fixed_rate.csv").exists()


def test_cli_reports_bad_config(tmp_path, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text("[experiment]\ndeltas = 1e-3, 1e-1\n")
    assert cli.main(["--config", str(ini), "solve-state"]) == 2
    assert "configuration error" in capsys.readouterr().err
    assert cli.main(["--config", str(tmp_path / "missing.ini"), "solve-state"]) == 2
