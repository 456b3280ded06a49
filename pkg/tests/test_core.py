import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tagged_mftg.core import (
    CHUNK,
    Ensemble,
    InvalidArgument,
    distance_to_mean_samples,
    distance_to_mean_series,
    empirical_law,
    make_grid,
    path_sum,
    sample_brownian,
    sample_gaussian,
    stream,
    tree_sum,
)


def test_grid_quarter_steps():
    g = make_grid(1.0, 4)
    assert g.dt == 0.25
    assert np.array_equal(g.times, [0, 0.25, 0.5, 0.75, 1.0])


def test_grid_fine_step():
    assert make_grid(4.0, 400).dt == pytest.approx(0.01, abs=1e-15)


@pytest.mark.parametrize("T,M", [(0.0, 10), (-1.0, 10), (1.0, 0)])
def test_grid_rejects_bad_arguments(T, M):
    with pytest.raises(InvalidArgument):
        make_grid(T, M)


@given(st.floats(1e-3, 1e3), st.integers(1, 2000))
def test_grid_invariants(T, M):
    t = make_grid(T, M).times
    assert t[0] == 0.0 and t[-1] == T
    assert np.all(np.diff(t) > 0)


def test_brownian_reproducible():
    g = make_grid(1.0, 20)
    a = sample_brownian(g, 50, (2, 2), seed=7)
    b = sample_brownian(g, 50, (2, 2), seed=7)
    assert np.array_equal(a.dBx, b.dBx) and np.array_equal(a.dBy, b.dBy)


def test_brownian_seeds_differ():
    g = make_grid(1.0, 20)
    a = sample_brownian(g, 10, (1, 1), seed=1)
    b = sample_brownian(g, 10, (1, 1), seed=2)
    assert not np.array_equal(a.dBy, b.dBy)


def test_brownian_paths_independent_of_ensemble_size():
    g = make_grid(1.0, 10)
    small = sample_brownian(g, 5, (1, 2), seed=3)
    big = sample_brownian(g, 40, (1, 2), seed=3)
    assert np.array_equal(small.dBy, big.dBy[:, :5])
    assert np.array_equal(small.dBx, big.dBx[:, :5])


def test_brownian_independent_of_workers():
    g = make_grid(1.0, 5)
    n = 2 * CHUNK + 17
    a = sample_brownian(g, n, (1, 1), seed=11, workers=1)
    b = sample_brownian(g, n, (1, 1), seed=11, workers=3)
    assert np.array_equal(a.dBy, b.dBy)


def test_brownian_increment_variance():
    g = make_grid(1.0, 100)
    dB = sample_brownian(g, 100_000, (0, 1), seed=0).dBy[0, :, 0]
    var = dB.var()
    se = np.sqrt(2.0) * g.dt / np.sqrt(dB.size)
    assert abs(var - g.dt) < 5 * se


def test_brownian_components_are_separate_streams():
    g = make_grid(1.0, 10)
    b = sample_brownian(g, 4, (1, 1), seed=0)
    assert not np.array_equal(b.dBx, b.dBy)


def test_coarsen_sums_increments():
    b = sample_brownian(make_grid(1.0, 12), 6, (1, 1), seed=5)
    c = b.coarsen(4)
    assert c.grid.steps == 3
    assert np.allclose(c.By[-1], b.By[-1], atol=1e-14)
    assert np.allclose(c.dBy[1], b.dBy[4:8].sum(axis=0))
    with pytest.raises(InvalidArgument):
        b.coarsen(5)


def test_streams_by_purpose_differ():
    x = stream(0, "brownian_x", 0, 0).standard_normal(4)
    y = stream(0, "brownian_y", 0, 0).standard_normal(4)
    assert not np.array_equal(x, y)


def test_gaussian_exact_mean_without_spread():
    s = sample_gaussian([1.5, -2.0], 0.0, 7, seed=0, purpose="initial_y")
    assert np.array_equal(s, np.tile([1.5, -2.0], (7, 1)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5000), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6)))
def test_path_sum_independent_of_workers(a):
    assert np.array_equal(path_sum(a, workers=1), path_sum(a, workers=4))
    assert np.allclose(path_sum(a), a.sum(axis=0), rtol=1e-9, atol=1e-6)


def test_tree_sum_matches_plain_sum():
    parts = [np.full(2, float(i)) for i in range(9)]
    assert np.array_equal(tree_sum(parts), np.full(2, 36.0))


@pytest.mark.parametrize("pts,mean", [
    ([[0, 0], [2, 2]], [1, 1]),
    ([[3.5, -1.0]], [3.5, -1.0]),
    ([[0, 0], [1, 0], [2, 0]], [1, 0]),
])
def test_empirical_mean_examples(pts, mean):
    assert np.allclose(empirical_law(np.array(pts, float)).mean, mean)


def test_empirical_law_rejects_empty():
    with pytest.raises(InvalidArgument):
        empirical_law(np.zeros((0, 2)))


@given(arrays(np.float64, st.tuples(st.integers(1, 200), st.integers(1, 3)), elements=st.floats(-1e3, 1e3)))
def test_empirical_law_recompute_matches(a):
    law = empirical_law(a, keep_samples=True)
    again = law.recompute()
    assert np.array_equal(law.mean, again.mean)
    assert np.array_equal(law.second_moment, again.second_moment)
    assert np.allclose(law.mean, a.mean(axis=0), atol=1e-9)


def _ensemble(Y):
    Y = np.asarray(Y, float)
    g = make_grid(1.0, Y.shape[0] - 1)
    return Ensemble(grid=g, Y=Y, Z=np.zeros(Y.shape + (1,)), Uy=np.zeros_like(Y))


def test_distance_to_mean_coincident_is_zero():
    ens = _ensemble(np.ones((4, 3, 2)))
    assert np.array_equal(distance_to_mean_series(ens), np.zeros(4))


def test_distance_to_mean_symmetric_pair():
    Y = np.zeros((5, 2, 2))
    Y[:, 1, 0] = 2.0
    assert np.allclose(distance_to_mean_series(_ensemble(Y)), 1.0)
    Y = np.zeros((5, 2, 2))
    Y[:, 0, 0], Y[:, 1, 0] = -1.0, 1.0
    assert np.allclose(distance_to_mean_series(_ensemble(Y)), 1.0)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 30), st.just(2)), elements=st.floats(-50, 50)))
def test_distance_to_mean_nonnegative(Y):
    d = distance_to_mean_samples(Y)
    assert d.shape == Y.shape[:2] and np.all(d >= 0)


def test_ensemble_shape_checks_and_freezing():
    Y = np.zeros((3, 4, 2))
    with pytest.raises(InvalidArgument):
        Ensemble(grid=make_grid(1.0, 3), Y=Y, Z=np.zeros((3, 4, 2, 1)), Uy=Y)
    ens = _ensemble(Y)
    with pytest.raises(ValueError):
        ens.Y[0, 0, 0] = 1.0
    with pytest.raises(InvalidArgument):
        ens.positions("ordinary")
