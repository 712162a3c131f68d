import numpy as np
import pytest

from mfswitch.backward import (DriverCallback, poly_features, poly_jacobian, solve_mkv_bsde,
                               transversality_check, write_backward_csv)
from mfswitch.forward import CoefficientCallbacks, draw_noise, simulate_conditional_mkv_sde
from mfswitch.grid import TimeGrid
from mfswitch.regime import validate_generator

GRID = TimeGrid(0.0, 1.0, 0.02)


def _brownian(scenarios=4, particles=256, d0=1, seed=0, gen=None):
    cb = CoefficientCallbacks(sigma=lambda t, x, mom, reg: np.ones(x.shape[:2] + (1, 1)),
                              sigma_tilde=(lambda t, x, mom, reg: 0.5 * np.ones(x.shape[:2] + (1, 1))) if d0 else None)
    return simulate_conditional_mkv_sde(cb, 0.0, draw_noise(GRID, scenarios, particles, 1, d0, seed, gen),
                                        keep_sigma_tilde=True)


def test_zero_data_gives_zero_solution():
    sol = solve_mkv_bsde(DriverCallback(), _brownian())
    assert np.all(sol.Y == 0) and np.all(sol.Z == 0) and np.all(sol.Z0 == 0)


def test_martingale_representation_of_terminal_state():
    fwd = _brownian()
    sol = solve_mkv_bsde(DriverCallback(), fwd, terminal=fwd.X[-1])
    np.testing.assert_allclose(sol.Y[0], 0.0, atol=1e-9)
    np.testing.assert_allclose(sol.Z[:-1], 1.0, atol=1e-8)
    np.testing.assert_allclose(sol.Z0[:-1], 0.5, atol=1e-8)
    np.testing.assert_allclose(sol.Y, fwd.X, atol=1e-8)


def test_constant_driver_integrates():
    sol = solve_mkv_bsde(DriverCallback(lambda t, x, y, z, z0, mom, reg: 2.0 + 0 * y), _brownian())
    np.testing.assert_allclose(sol.Y[:, 0, 0, 0], 2.0 * (GRID.horizon - GRID.nodes), atol=1e-9)


def test_regime_dependent_terminal_needs_jump_term():
    gen = validate_generator([[-2.0, 2.0], [2.0, -2.0]])
    fwd = _brownian(scenarios=64, particles=16, d0=0, seed=3, gen=gen)
    states = fwd.noise.states[-1]
    term = states[:, None, None].astype(float) * np.ones((64, 16, 1))
    sol = solve_mkv_bsde(DriverCallback(), fwd, terminal=term)
    # E[1{regime_T = 1} | regime_0 = 0] = (1 - exp(-4T)) / 2
    assert sol.Y[0].mean() == pytest.approx((1 - np.exp(-4.0)) / 2, abs=0.08)
    assert np.abs(sol.K).max() > 0
    free = solve_mkv_bsde(DriverCallback(), fwd, terminal=np.ones((64, 16, 1)), regime_free=True)
    assert np.all(free.K == 0)
    np.testing.assert_allclose(free.Y, 1.0)


def test_polynomial_features_and_jacobian():
    x = np.random.default_rng(0).normal(size=(3, 5, 2))
    phi = poly_features(x, 2)
    assert phi.shape == (3, 5, 6)
    jac = poly_jacobian(x, 2)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (poly_features(x + e, 2) - poly_features(x - e, 2)) / (2 * h)
        np.testing.assert_allclose(jac[..., i], fd, atol=1e-6)


def test_transversality_table_flags_growth():
    sols = []
    for H in (2.0, 3.0):
        grid = TimeGrid(0.0, H, 0.05)
        fwd = simulate_conditional_mkv_sde(CoefficientCallbacks(), 0.0, draw_noise(grid, 1, 4, 1, 0, 0))
        sols.append(solve_mkv_bsde(DriverCallback(lambda t, x, y, z, z0, mom, reg: 1.0 + 0 * y), fwd))
    table = transversality_check(sols, 0.0, [0.0, 0.5, 1.0])
    assert table.decreasing.all()
    assert not table.horizon_insensitive(0.05)
    rising = transversality_check(sols, 5.0, [0.0, 0.5, 1.0])
    assert not rising.decreasing.any()


def test_backward_csv(tmp_path):
    sol = solve_mkv_bsde(DriverCallback(), _brownian(scenarios=1, particles=2))
    write_backward_csv(sol, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0].startswith("time")
