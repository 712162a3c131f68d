import numpy as np
import pytest

from mfswitch.forward import (CoefficientCallbacks, NonFiniteState, draw_noise, horizon_for_tail,
                              simulate_conditional_mkv_sde, weighted_l2_profile, write_ensemble_csv)
from mfswitch.grid import TimeGrid
from mfswitch.measure import DimensionMismatch
from mfswitch.regime import validate_generator

GRID = TimeGrid(0.0, 1.0, 0.05)


def test_noise_prefix_stability_and_threads():
    gen = validate_generator([[-1.0, 1.0], [1.0, -1.0]])
    small = draw_noise(GRID, 2, 3, 2, 1, seed=9, gen=gen)
    big = draw_noise(GRID, 4, 7, 2, 1, seed=9, gen=gen, threads=3)
    np.testing.assert_array_equal(small.dW, big.dW[:, :2, :3])
    np.testing.assert_array_equal(small.dW0, big.dW0[:, :2])
    np.testing.assert_array_equal(small.states, big.states[:, :2])
    assert small.dM.shape == (GRID.n_steps, 2, 2, 2)


def test_noise_scale():
    nb = draw_noise(TimeGrid(0.0, 1.0, 0.01), 4, 500, 1, 1, seed=1)
    assert nb.dW.std() == pytest.approx(0.1, rel=0.02)


def test_deterministic_linear_drift():
    cb = CoefficientCallbacks(b=lambda t, x, mom, reg: -x + mom.mean)
    batch = simulate_conditional_mkv_sde(cb, 2.0, draw_noise(GRID, 1, 4, 1, 0, seed=0))
    np.testing.assert_allclose(batch.X, 2.0)


def test_euler_matches_geometric_factor():
    cb = CoefficientCallbacks(b=lambda t, x, mom, reg: -0.5 * x)
    X = simulate_conditional_mkv_sde(cb, 1.0, draw_noise(GRID, 1, 1, 1, 0, seed=0)).X
    np.testing.assert_allclose(X[:, 0, 0, 0], (1 - 0.5 * GRID.dt) ** np.arange(GRID.n_nodes))


def test_common_noise_shared_within_scenario():
    cb = CoefficientCallbacks(sigma_tilde=lambda t, x, mom, reg: np.ones(x.shape[:2] + (1, 1)))
    batch = simulate_conditional_mkv_sde(cb, 0.0, draw_noise(GRID, 3, 5, 1, 1, seed=2), keep_sigma_tilde=True)
    assert np.ptp(batch.X[-1], axis=1).max() == 0.0
    assert np.ptp(batch.X[-1, :, 0, 0]) > 0
    assert batch.sigma_tilde.shape == (GRID.n_steps, 3, 5, 1, 1)


def test_regime_dependent_drift_uses_left_state():
    gen = validate_generator([[-3.0, 3.0], [3.0, -3.0]])
    noise = draw_noise(GRID, 4, 2, 1, 0, seed=4, gen=gen)
    cb = CoefficientCallbacks(b=lambda t, x, mom, reg: reg[:, None, None].astype(float))
    X = simulate_conditional_mkv_sde(cb, 0.0, noise).X
    expected = np.cumsum(noise.states[:-1], axis=0) * GRID.dt
    np.testing.assert_allclose(X[1:, :, 0, 0], expected)


def test_sampled_initial_law_and_shapes():
    noise = draw_noise(GRID, 2, 3, 1, 0, seed=5)
    X = simulate_conditional_mkv_sde(CoefficientCallbacks(), lambda rng: rng.normal(size=2), noise).X
    assert X.shape == (GRID.n_nodes, 2, 3, 2)
    again = simulate_conditional_mkv_sde(CoefficientCallbacks(), lambda rng: rng.normal(size=2), noise).X
    np.testing.assert_array_equal(X, again)
    with pytest.raises(DimensionMismatch):
        simulate_conditional_mkv_sde(CoefficientCallbacks(), np.zeros((5, 5, 5, 5)), noise)


def test_blow_up_reported():
    cb = CoefficientCallbacks(b=lambda t, x, mom, reg: x ** 2 * 1e200)
    with pytest.raises(NonFiniteState) as info, np.errstate(over="ignore", invalid="ignore"):
        simulate_conditional_mkv_sde(cb, 1.0, draw_noise(GRID, 1, 1, 1, 0, seed=0))
    assert info.value.node >= 1


def test_weighted_profile_and_tail_horizon(tmp_path):
    noise = draw_noise(GRID, 1, 2, 1, 0, seed=0)
    batch = simulate_conditional_mkv_sde(CoefficientCallbacks(), 1.0, noise)
    profile, total = weighted_l2_profile(batch, -1.0)
    np.testing.assert_allclose(profile, np.exp(-GRID.nodes))
    assert total == pytest.approx(1 - np.exp(-1), rel=1e-3)
    assert horizon_for_tail(0.0, -1.0, 1.0, 1e-3) == pytest.approx(np.log(1e3) / 2)
    with pytest.raises(ValueError):
        horizon_for_tail(0.0, 1.0, 1.0)
    write_ensemble_csv(batch, tmp_path / "e.csv")
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 1 + GRID.n_nodes * 2
