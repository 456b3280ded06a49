import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagged_mftg.core import make_grid, path_mean, sample_brownian
from tagged_mftg.game import CoefficientSet
from tagged_mftg.lsmc import (
    DegenerateRegression,
    ForwardBlowUp,
    PicardConfig,
    RegressionBasis,
    backward_lsmc,
    forward_euler,
    regress_conditional,
    solve_equilibrium,
)
from tagged_mftg.lq import solve_lq
from tagged_mftg.scenarios import builtin

from conftest import solved


@pytest.fixture(scope="module")
def brownian():
    grid = make_grid(1.0, 50)
    return grid, sample_brownian(grid, 20_000, (0, 1), seed=3)


def test_martingale_regression_slope(brownian):
    grid, b = brownian
    B = b.By[..., 0]
    fn, _ = regress_conditional(B[-1], RegressionBasis("polynomial", 1), B[25])
    assert fn.coef[0, 0] == pytest.approx(0.0, abs=0.03)
    assert fn.coef[1, 0] == pytest.approx(1.0, abs=0.03)


def test_second_moment_regression(brownian):
    grid, b = brownian
    B = b.By[..., 0]
    t = grid.times[20]
    fn, _ = regress_conditional(B[-1] ** 2, RegressionBasis("polynomial", 2), B[20])
    assert np.allclose(fn.coef[:, 0], [1.0 - t, 0.0, 1.0], atol=0.05)


def test_constant_targets_are_reproduced(brownian):
    _, b = brownian
    fn, fitted = regress_conditional(np.full(b.n_paths, 2.5), RegressionBasis("polynomial", 2), b.By[10])
    assert np.allclose(fitted, 2.5, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_orthogonal_to_basis(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(400, 2))
    y = np.sin(x[:, 0]) + x[:, 1] ** 3 + rng.normal(size=400)
    basis = RegressionBasis("polynomial", 2)
    _, fitted = regress_conditional(y, basis, x, ridge=0.0)
    A = basis.design(x)
    assert np.max(np.abs(A.T @ (y - fitted))) <= 1e-8 * max(1.0, np.abs(A.T @ y).max())


def test_degenerate_design_flagged():
    x = np.ones((100, 1))
    with pytest.raises(DegenerateRegression):
        regress_conditional(np.arange(100.0), RegressionBasis("polynomial", 1), x, ridge=0.0)
    _, fitted = regress_conditional(np.arange(100.0), RegressionBasis("polynomial", 1), x, ridge=1e-8)
    assert np.allclose(fitted, 49.5)


def test_forward_euler_examples():
    grid = make_grid(1.0, 7)
    b = sample_brownian(grid, 5, (2, 0), seed=0)
    x0 = np.zeros((5, 2))
    X = forward_euler(x0, lambda k, t, x: np.zeros_like(x), 0.0, b.dBx, grid)
    assert np.array_equal(X, np.zeros((8, 5, 2)))
    X = forward_euler(x0, lambda k, t, x: np.tile([1.0, 0.0], (5, 1)), 0.0, b.dBx, grid)
    assert np.allclose(X[-1], [1.0, 0.0], atol=1e-14)
    X = forward_euler(x0, lambda k, t, x: np.zeros_like(x), 1.0, b.dBx, grid)
    assert np.allclose(X[-1] - X[0], b.Bx[-1], atol=1e-14)
    assert np.array_equal(X[0], x0)


def test_forward_euler_reports_blowup():
    grid = make_grid(1.0, 10)
    b = sample_brownian(grid, 2, (1, 0), seed=0)
    with pytest.raises(ForwardBlowUp) as info:
        forward_euler(np.ones((2, 1)), lambda k, t, x: np.where(k >= 3, np.nan, 0.0) * x, 0.0, b.dBx, grid)
    assert info.value.step == 4


def test_backward_constant_terminal(brownian):
    grid, b = brownian
    sol = backward_lsmc(np.full((b.n_paths, 2), 3.0), None, RegressionBasis("polynomial", 2),
                        b.By, b.dBy, grid)
    assert np.allclose(sol.Y, 3.0, atol=1e-9)
    assert np.allclose(sol.Z, 0.0, atol=1e-9)


def test_backward_martingale(brownian):
    grid, b = brownian
    B = b.By
    sol = backward_lsmc(B[-1], None, RegressionBasis("polynomial", 2), B, b.dBy, grid)
    assert np.array_equal(sol.Y[-1], B[-1])
    err = np.sqrt(np.mean((sol.Y - B) ** 2, axis=(1, 2)))
    assert err.max() < 0.05
    assert np.mean(np.abs(sol.Z[:-1] - 1.0)) < 0.05


def test_backward_constant_driver(brownian):
    grid, b = brownian
    sol = backward_lsmc(np.full((b.n_paths, 1), 1.0), np.full((grid.steps, b.n_paths, 1), 0.25),
                        RegressionBasis("polynomial", 1), b.By, b.dBy, grid)
    assert np.allclose(sol.Y[0], 1.0 - 0.25, atol=1e-9)


def test_backward_preserves_mean(brownian):
    grid, b = brownian
    B = b.By
    sol = backward_lsmc(np.sin(3 * B[-1]), None, RegressionBasis("polynomial", 2), B, b.dBy, grid)
    means = path_mean(sol.Y, axis=1)
    assert np.allclose(means, means[-1], atol=1e-8)


def test_picard_config_validation():
    with pytest.raises(Exception):
        PicardConfig(damping=0.0)
    with pytest.raises(Exception):
        PicardConfig(tol=0.0)


def test_decoupled_noise_free_converges_fast():
    spec = builtin("kt_set2").with_overrides({"tagged.noise": 0.0, "tagged.y0.std": 0.0, "solver.paths": 200})
    res = solve_equilibrium(spec)
    assert res.converged and res.diagnostics["iterations"] <= 2
    ref = solve_lq(spec)
    assert np.allclose(res.ensemble.Y, ref.ensemble.Y, atol=1e-6)


def test_keep_together_without_attraction_matches_lq():
    a, b = solved("kt_set2", "lsmc"), solved("kt_set2", "lq")
    assert a.converged
    gap = np.abs(path_mean(a.ensemble.Y, axis=1) - path_mean(b.ensemble.Y, axis=1))
    assert gap.max() < 0.02


def test_tagged_argmax_and_boundaries_hold():
    res = solved("kt_set1", "lsmc")
    c = CoefficientSet.from_spec(res.spec)
    ens, adj = res.ensemble, res.adjoints
    assert np.array_equal(ens.Y[-1], res.samples.yT)
    assert np.array_equal(adj.pyy[0], c.initial_adjoint(ens.Y[0], res.samples.y0))
    assert np.allclose(adj.qyy, 0.0)


def test_ordinary_argmax_and_boundaries_hold():
    res = solved("bidir", "lsmc")
    c = CoefficientSet.from_spec(res.spec)
    ens, adj = res.ensemble, res.adjoints
    assert np.array_equal(ens.X[0], res.samples.x0)
    assert np.array_equal(ens.Y[-1], res.samples.yT)
    assert np.array_equal(adj.pxx[-1], c.terminal_adjoint(ens.X[-1]))
    assert np.array_equal(adj.pyx[-1], np.zeros_like(adj.pyx[-1]))
    assert np.array_equal(adj.pxy[0], np.zeros_like(adj.pxy[0]))
    assert np.allclose(ens.Ux[:-1], adj.pxx[:-1] / c.x_cont, atol=1e-12)


def test_bidirectional_means_match_boundary_value_oracle():
    """Mean dynamics of the linear game form a deterministic two-point problem."""
    from scipy.integrate import solve_bvp

    res = solved("bidir", "lsmc")
    spec = res.spec
    tg, od = spec.tagged, spec.ordinary
    t = res.ensemble.grid.times
    for j in range(spec.dim):
        def f(_, s):
            Y, py, X, px = s
            return np.vstack([py / tg.cont, tg.rep_crowd * (Y - X), px / od.cont, od.rep * (X - Y)])

        def bc(a, b):
            return np.array([a[1] - tg.init * (a[0] - tg.y0_mean[j]), b[0] - tg.yT_mean[j],
                             a[2] - od.x0_mean[j], b[3] + od.term * (b[2] - od.xT[j])])

        guess = np.zeros((4, t.size))
        guess[0], guess[2] = tg.yT_mean[j], od.x0_mean[j]
        sol = solve_bvp(f, bc, t, guess, tol=1e-8, max_nodes=100_000)
        assert sol.status == 0
        S = sol.sol(t)
        assert np.max(np.abs(path_mean(res.ensemble.Y[..., j], axis=1) - S[0])) < 0.06
        assert np.max(np.abs(path_mean(res.ensemble.X[..., j], axis=1) - S[2])) < 0.06


def test_non_convergence_is_reported():
    spec = builtin("bidir").with_overrides({"solver.paths": 500, "solver.max_iters": 2})
    res = solve_equilibrium(spec)
    assert not res.converged
    assert len(res.diagnostics["residuals"]) == 2
    assert res.ensemble.is_finite()


def test_solution_reproducible():
    spec = builtin("dv_set1").with_overrides({"solver.paths": 500})
    a, b = solve_equilibrium(spec), solve_equilibrium(spec)
    assert np.array_equal(a.ensemble.Y, b.ensemble.Y)
    assert np.array_equal(a.ensemble.Z, b.ensemble.Z)
