import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfswitch.grid import TimeGrid
from mfswitch.regime import (NegativeIntensity, NoOccupationTime, NotSquare, RowSumNonzero, StateOutOfRange,
                             empirical_generator, jump_martingale_ledger, simulate_regime_path,
                             validate_generator, write_path_csv)

generators = st.integers(2, 4).flatmap(
    lambda m0: st.lists(st.floats(0.0, 5.0), min_size=m0 * (m0 - 1), max_size=m0 * (m0 - 1))
    .map(lambda v: _gen_from(np.array(v), m0)))


def _gen_from(values, m0):
    a = np.zeros((m0, m0))
    a[~np.eye(m0, dtype=bool)] = values
    np.fill_diagonal(a, -a.sum(axis=1))
    return a


@pytest.mark.parametrize("raw, exc", [
    ([[0.0, 1.0]], NotSquare),
    ([[1.0, -1.0], [1.0, -1.0]], NegativeIntensity),
    ([[-1.0, 2.0], [1.0, -1.0]], RowSumNonzero),
])
def test_invalid_generators(raw, exc):
    with pytest.raises(exc):
        validate_generator(raw)


@given(generators)
@settings(max_examples=40, deadline=None)
def test_transition_matrix_is_stochastic(raw):
    gen = validate_generator(raw)
    P = gen.transition_matrix(0.3)
    assert np.all(P >= -1e-12)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_path_and_ledger_are_consistent(seed):
    gen = validate_generator([[-1.0, 0.5, 0.5], [2.0, -2.0, 0.0], [1.0, 1.0, -2.0]])
    grid = TimeGrid(0.0, 5.0, 0.05)
    path = simulate_regime_path(gen, 1, grid, np.random.default_rng(seed))
    assert path.states[0] == 1
    assert np.all(path.jump_pairs[:, 0] != path.jump_pairs[:, 1])
    if path.jump_times.size:
        np.testing.assert_array_equal(path.jump_pairs[1:, 0], path.jump_pairs[:-1, 1])
    occ = path.occupation_at([grid.horizon], 3)[0]
    assert occ.sum() == pytest.approx(grid.horizon)
    led = jump_martingale_ledger(path, gen)
    assert led.counting.sum() == path.jump_times.size
    np.testing.assert_allclose(led.compensator.sum(axis=(0, 2)), occ * np.array([1.0, 2.0, 2.0]))
    np.testing.assert_allclose(led.cumulative()[-1], led.total())


def test_absorbing_regime_never_jumps():
    gen = validate_generator([[0.0, 0.0], [1.0, -1.0]])
    path = simulate_regime_path(gen, 0, TimeGrid(0.0, 10.0, 0.1), np.random.default_rng(0))
    assert path.jump_times.size == 0 and np.all(path.states == 0)


def test_initial_regime_checked():
    gen = validate_generator([[-1.0, 1.0], [1.0, -1.0]])
    with pytest.raises(StateOutOfRange):
        simulate_regime_path(gen, 2, TimeGrid(0.0, 1.0, 0.1), np.random.default_rng(0))


def test_unvisited_regime_warns():
    gen = validate_generator([[0.0, 0.0], [1.0, -1.0]])
    paths = [simulate_regime_path(gen, 0, TimeGrid(0.0, 1.0, 0.1), np.random.default_rng(i)) for i in range(3)]
    with pytest.warns(NoOccupationTime):
        est = empirical_generator(paths, m0=2)
    assert est.undefined.tolist() == [False, True]
    assert np.all(np.isnan(est.rates[1]))


def test_empirical_rows_sum_to_zero():
    gen = validate_generator([[-1.0, 1.0], [2.0, -2.0]])
    rng = np.random.default_rng(3)
    paths = [simulate_regime_path(gen, 0, TimeGrid(0.0, 10.0, 0.1), rng) for _ in range(50)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        est = empirical_generator(paths)
    np.testing.assert_allclose(est.rates.sum(axis=1), 0.0, atol=1e-12)


def test_path_csv(tmp_path):
    gen = validate_generator([[-1.0, 1.0], [1.0, -1.0]])
    grid = TimeGrid(0.0, 1.0, 0.25)
    path = simulate_regime_path(gen, 0, grid, np.random.default_rng(0))
    write_path_csv(path, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "time,regime" and len(lines) == grid.n_nodes + 1
