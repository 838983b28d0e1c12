import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mccinv import fem
from mccinv.fem import NodalField, ProblemData, StateSolveError
from mccinv.mesh import CellField, GridTriple, uniform_grid

from oracles import simpson_l2


def test_zero_coefficient_is_nodally_exact():
    sim = uniform_grid(16)
    c = 3.0
    u = fem.solve_state(ProblemData.constant(5.0, c), CellField(uniform_grid(1), [0.0]), sim)
    x = sim.breakpoints
    np.testing.assert_allclose(u.values, c * x * (1 - x) / 2, atol=1e-13)


def test_zero_load_gives_zero_state():
    u = fem.solve_state(ProblemData.constant(36.0, 0.0), CellField(uniform_grid(3), [0.1, 0.5, 0.9]),
                        uniform_grid(64))
    assert np.all(u.values == 0)


def test_state_is_deterministic_and_nonnegative():
    pd, sim = ProblemData.benchmark(), uniform_grid(1024)
    a = fem.solve_state(pd, fem.truth_coefficient, sim)
    b = fem.solve_state(pd, fem.truth_coefficient, sim)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.min() >= 0
    assert a.values[0] == a.values[-1] == 0


def test_assembled_residual_small():
    pd, sim = ProblemData.benchmark(), uniform_grid(256)
    w = CellField(uniform_grid(7), np.linspace(0, 1, 7))
    u = fem.solve_state(pd, w, sim)
    asm = fem.assembly(pd, sim)
    rd, ro = fem.reaction_bands(pd, w, sim)
    d, o = asm.stiff_diag + rd[1:-1], asm.stiff_off + ro[1:-1]
    ui = u.interior
    Ku = d * ui
    Ku[1:] += o * ui[:-1]
    Ku[:-1] += o * ui[1:]
    assert np.abs(Ku - asm.load).max() <= 1e-10 * np.abs(asm.load).max()


def test_indefinite_operator_reported():
    pd = ProblemData.constant(1.0, 1.0, w_lo=-100.0)
    with pytest.raises(StateSolveError):
        fem.solve_state(pd, CellField(uniform_grid(1), [-2000.0]), uniform_grid(32))


def test_stiffness_and_mass_spd():
    sim = uniform_grid(12)
    asm = fem.assembly(ProblemData.benchmark(), sim)
    K = np.diag(asm.stiff_diag) + np.diag(asm.stiff_off, 1) + np.diag(asm.stiff_off, -1)
    M = fem.assembly_mass(sim).toarray()
    for mat in (K, M):
        np.testing.assert_allclose(mat, mat.T)
        assert np.linalg.eigvalsh(mat).min() > 0


def test_averaged_with_zero_coefficient_equals_plain():
    pd = ProblemData.benchmark()
    t = GridTriple.uniform(128, 16, 4)
    w = CellField(t.h, np.zeros(4))
    np.testing.assert_allclose(fem.solve_state_averaged(pd, w, t).values,
                               fem.solve_state(pd, w, t.sim).values, atol=1e-13)


def test_averaged_state_converges_for_constant_coefficient():
    pd = ProblemData.benchmark()
    w_h = CellField(uniform_grid(1), [0.5])
    u = fem.solve_state(pd, w_h, uniform_grid(1024))
    errs = [fem.misfit(fem.solve_state_averaged(pd, w_h, GridTriple.uniform(1024, n, 1)), u)
            for n in (8, 16, 32, 64)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_averaged_state_first_order_in_tau():
    pd = ProblemData.benchmark()
    h = uniform_grid(8)
    w = CellField(h, np.cos(2 * np.pi * h.midpoints) ** 2)
    u = fem.solve_state(pd, w, uniform_grid(1024))
    ns = np.array([8, 16, 32, 64, 128])
    errs = np.array([fem.misfit(fem.solve_state_averaged(pd, w, GridTriple.uniform(1024, n, 8)), u) for n in ns])
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert slope >= 1.0


def test_misfit_examples():
    sim = uniform_grid(10)
    y = NodalField(sim, np.linspace(0, 1, 11))
    assert fem.misfit(y, y) == 0
    assert fem.misfit(NodalField(sim, y.values + 1), y) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(ValueError):
        fem.misfit(y, NodalField(uniform_grid(5), np.zeros(6)))


def test_misfit_matches_quadrature_oracle():
    rng = np.random.default_rng(1)
    sim = uniform_grid(64)
    u, y = (NodalField(sim, rng.normal(size=65)) for _ in range(2))
    ref = np.sqrt(simpson_l2(lambda x: (u(x) - y(x)) ** 2, n=640))
    assert fem.misfit(u, y) == pytest.approx(ref, abs=1e-12)


def _fd_check(pd, w, y, sim, step=1e-6):
    g = fem.adjoint_gradient(pd, w, y, sim).values
    fd = np.empty_like(g)
    for j in range(g.size):
        e = np.zeros(g.size)
        e[j] = step
        fp = fem.objective_and_gradient(pd, CellField(w.grid, w.values + e), y, sim)[0]
        fm = fem.objective_and_gradient(pd, CellField(w.grid, w.values - e), y, sim)[0]
        fd[j] = (fp - fm) / (2 * step)
    return np.abs(g - fd).max() / np.abs(fd).max()


def test_gradient_matches_fd_three_cells():
    pd, sim = ProblemData.benchmark(), uniform_grid(64)
    rng = np.random.default_rng(2)
    y = fem.solve_state(pd, CellField(uniform_grid(3), rng.uniform(size=3)), sim)
    w = CellField(uniform_grid(3), rng.uniform(size=3))
    assert _fd_check(pd, w, y, sim) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(8, 64), st.floats(0.5, 50), st.floats(-20, 20).filter(lambda v: abs(v) > 0.1),
       st.integers(0, 2**31))
def test_gradient_matches_fd_random(n_h, n_sim, f0, f1, seed):
    rng = np.random.default_rng(seed)
    pd = ProblemData.constant(f0, f1)
    sim = uniform_grid(n_sim)
    y = NodalField(sim, np.concatenate([[0], rng.normal(scale=abs(f1) * 0.05, size=n_sim - 1), [0]]))
    w = CellField(uniform_grid(n_h), rng.uniform(size=n_h))
    assert _fd_check(pd, w, y, sim) <= 1e-6


def test_gradient_vanishes_at_exact_data():
    pd, sim = ProblemData.benchmark(), uniform_grid(128)
    w = CellField(uniform_grid(5), [0.1, 0.3, 0.7, 0.2, 0.9])
    y = fem.solve_state(pd, w, sim)
    assert np.abs(fem.adjoint_gradient(pd, w, y, sim).values).max() < 1e-14


def test_gradient_scales_quadratically_with_load():
    sim = uniform_grid(64)
    w = CellField(uniform_grid(4), [0.2, 0.4, 0.6, 0.8])
    y = NodalField(sim, np.zeros(65))
    g1 = fem.adjoint_gradient(ProblemData.constant(36.0, 1.0), w, y, sim).values
    g3 = fem.adjoint_gradient(ProblemData.constant(36.0, 3.0), w, y, sim).values
    np.testing.assert_allclose(g3, 9 * g1, rtol=1e-12)
