import math

import numpy as np
import pytest

from continuum_kernels.closed_form import solve_closed_form
from continuum_kernels.fd_kernels import TriGrid, solve_characteristics
from continuum_kernels.gains import (GainTable, continuum_residual,
                                     diff_solutions, gains,
                                     largescale_residual, read_gain_csv,
                                     sample_gains, write_gain_csv)
from continuum_kernels.power_series import SolverConfig, solve
from continuum_kernels.series import SeparableSum, SeparableTerm, Var

X, XI, Y, ETA = Var.X, Var.XI, Var.Y, Var.ETA


class TestGains:
    def test_closed_form_point(self, example1):
        kern = solve_closed_form(example1.continuum)
        t = gains(kern, grid_xi=np.array([0.0, 0.5]),
                  grid_y=np.array([0.5, 1.0]))
        assert t.k[0, 0] == pytest.approx(-8.75)
        assert t.k[1, 0] == pytest.approx(0.0, abs=1e-14)
        assert t.kbar[0] == pytest.approx(35.0 / (2 * math.pi ** 2))

    def test_zero_solution_zero_table(self, zero_problem):
        sol = solve(zero_problem.continuum, SolverConfig(N=3))
        t = gains(sol)
        assert np.all(t.k == 0.0) and np.all(t.kbar == 0.0)

    def test_series_matches_closed_form_eval_path(self, solve_cache,
                                                  exact_gain_reference):
        sol = solve_cache.solution("example1", SolverConfig(N=14))
        grid = np.linspace(0, 1, 31)
        t = gains(sol, grid_xi=grid, grid_y=grid)
        kx, kbx = exact_gain_reference(grid, grid)
        assert np.abs(t.k - kx).max() < 1.0

    def test_sample_gains_rows(self, example1):
        kern = solve_closed_form(example1.continuum)
        grid = np.linspace(0, 1, 11)
        t = sample_gains(kern, 10, grid_xi=grid)
        assert t.sampled
        np.testing.assert_allclose(t.grid_y, np.arange(1, 11) / 10)
        # last component sits at y=1 where the quadratic profile vanishes
        np.testing.assert_allclose(t.k[-1], 0.0, atol=1e-13)

    def test_single_member_ensemble(self, example1):
        kern = solve_closed_form(example1.continuum)
        t = sample_gains(kern, 1)
        assert t.k.shape[0] == 1
        np.testing.assert_allclose(t.grid_y, [1.0])

    def test_gains_match_sample_gains_rowwise(self, solve_cache):
        sol = solve_cache.solution("example1", SolverConfig(N=10))
        grid = np.linspace(0, 1, 21)
        sampled = sample_gains(sol, 5, grid_xi=grid)
        direct = gains(sol, grid_xi=grid, grid_y=np.arange(1, 6) / 5)
        np.testing.assert_array_equal(sampled.k, direct.k)
        np.testing.assert_array_equal(sampled.kbar, direct.kbar)


class TestDiffSolutions:
    def rand_table(self, rng, grid):
        return GainTable(grid_xi=grid, grid_y=grid,
                         k=rng.normal(size=(len(grid), len(grid))),
                         kbar=rng.normal(size=len(grid)))

    def test_identical_tables(self, example1):
        kern = solve_closed_form(example1.continuum)
        t = gains(kern)
        assert diff_solutions(t, t) == 0.0

    def test_metric_properties(self):
        rng = np.random.default_rng(3)
        grid = np.linspace(0, 1, 9)
        a, b, c = (self.rand_table(rng, grid) for _ in range(3))
        dab = diff_solutions(a, b)
        assert dab == diff_solutions(b, a)
        assert dab > 0.0
        assert diff_solutions(a, c) <= dab + diff_solutions(b, c) + 1e-14

    def test_grid_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        a = self.rand_table(rng, np.linspace(0, 1, 9))
        b = self.rand_table(rng, np.linspace(0, 1, 10))
        with pytest.raises(ValueError, match="grid"):
            diff_solutions(a, b)


class TestContinuumResidual:
    def test_zero_kernel_violates_diag_bc(self, example1, zero_problem):
        zero_sol = solve(zero_problem.continuum, SolverConfig(N=6))
        res = continuum_residual(zero_sol, example1.continuum)
        # both PDEs hold trivially at zero; the diagonal data does not
        assert res["bc_diag"] > 1e-2
        assert res["pde_k"] == 0.0

    def test_series_solution_commensurate_with_lsq_residual(self, solve_cache):
        sol = solve_cache.solution("example1", SolverConfig(N=14))
        res = continuum_residual(sol, solve_cache.problem("example1").continuum)
        assert max(res.values()) < 10.0 * max(sol.residual, 1e-16) + 1e-12


class TestLargescaleResidual:
    def test_single_member_constant_ensemble(self):
        # y-independent problem: the n=1 sums coincide with the integrals
        from continuum_kernels.params import ContinuumParams, sample_continuum

        from continuum_kernels.series import Exp

        p = ContinuumParams(
            lam=SeparableSum.constant(1.0), mu=SeparableSum.constant(1.0),
            sigma=SeparableSum([SeparableTerm(0.4, [])]),
            theta=SeparableSum([SeparableTerm(-2.0, [Exp(X, 0.4)])]),
            W=SeparableSum.zero(),
            q=SeparableSum.constant(0.3),
        )
        kern = solve_closed_form(p)
        from continuum_kernels.closed_form import NotApplicable
        assert not isinstance(kern, NotApplicable), getattr(kern, "reason", "")
        res_c = continuum_residual(kern, p, grid_m=17)
        ls = sample_continuum(p, 1)
        res_l = largescale_residual(kern, ls, grid_m=16)
        for key in res_c:
            assert res_l[key] == pytest.approx(res_c[key], abs=5e-9)

    def test_fd_solution_residual_shrinks_with_mesh(self, example2):
        ls = example2.large_scale()
        r32 = largescale_residual(solve_characteristics(ls, TriGrid(32)), ls)
        r128 = largescale_residual(solve_characteristics(ls, TriGrid(128)), ls)
        assert r128["pde_k"] < r32["pde_k"]
        assert r128["pde_kbar"] < r32["pde_kbar"]
        assert r128["bc_diag"] == 0.0

    def test_sampled_series_plateau(self, example2, solve_cache):
        # sampled ensemble kernels approximate the n+1 equations up to the
        # finite-n ensemble error, which does not vanish with solver order
        ls = example2.large_scale()
        r = largescale_residual(
            solve_cache.solution("example2", SolverConfig(N=12)), ls,
            grid_m=24)
        assert 1e-4 < max(r.values()) < 50.0


class TestCsvRoundTrip:
    def test_exact_roundtrip_and_determinism(self, tmp_path, example1):
        kern = solve_closed_form(example1.continuum)
        t = sample_gains(kern, 7, grid_xi=np.linspace(0, 1, 33))
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_gain_csv(t, p1, manifest="m.json")
        write_gain_csv(t, p2, manifest="m.json")
        assert p1.read_bytes() == p2.read_bytes()
        back = read_gain_csv(p1)
        np.testing.assert_array_equal(back.k, t.k)
        np.testing.assert_array_equal(back.kbar, t.kbar)
        np.testing.assert_array_equal(back.grid_xi, t.grid_xi)
        assert back.sampled == t.sampled

    def test_reader_requires_data(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("# nothing\n")
        with pytest.raises(ValueError):
            read_gain_csv(p)
