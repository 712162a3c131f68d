from dataclasses import replace

import numpy as np
import pytest

from mfswitch.backward import DriverCallback, solve_mkv_bsde
from mfswitch.coupled import (FBSDEProblem, NoConvergence, Numerics, StepFloorReached,
                              solve_fbsde_continuation, solve_fbsde_picard, verify_domination_monotonicity,
                              write_history_csv)
from mfswitch.coupled import TestFunctionals as Functionals
from mfswitch.forward import CoefficientCallbacks, simulate_conditional_mkv_sde
from mfswitch.grid import TimeGrid

NM = Numerics(dt=0.05, particles=64, scenarios=2, seed=1, tol=1e-8, max_iters=80)
GRID = TimeGrid(0.0, 1.0, 0.05)
ONE = lambda t, x, y, z, z0, mom, reg: np.ones(x.shape[:2] + (1, 1))


def decoupled():
    return FBSDEProblem(n=1, d=1, d0=0, grid=GRID, x0=1.0, b=lambda t, x, y, z, z0, mom, reg: -x,
                        sigma=lambda t, x, y, z, z0, mom, reg: 0.3 * np.ones(x.shape[:2] + (1, 1)),
                        f=lambda t, x, y, z, z0, mom, reg: x - 0.5 * y, kappa=-0.5, numerics=NM)


def coupled(strength):
    p = decoupled()
    return replace(p, b=lambda t, x, y, z, z0, mom, reg: -x - strength * y,
                   f=lambda t, x, y, z, z0, mom, reg: x - y - 0.5 * mom.y)


def test_decoupled_problem_matches_one_pass():
    p = decoupled()
    sol = solve_fbsde_picard(p, damping=1.0)
    noise = p.noise()
    cb = CoefficientCallbacks(b=lambda t, x, mom, reg: -x, sigma=lambda t, x, mom, reg: 0.3 + 0 * x[..., None, :])
    fwd = simulate_conditional_mkv_sde(cb, 1.0, noise)
    bwd = solve_mkv_bsde(DriverCallback(lambda t, x, y, z, z0, mom, reg: x - 0.5 * y), fwd)
    np.testing.assert_allclose(sol.forward.X, fwd.X, atol=1e-12)
    np.testing.assert_allclose(sol.backward.Y, bwd.Y, atol=1e-10)
    assert sol.converged and len(sol.history) <= 3


def test_coupled_picard_contracts_and_continuation_agrees(tmp_path):
    p = coupled(0.5)
    pic = solve_fbsde_picard(p)
    assert pic.converged and np.median(pic.ratios) < 0.9
    cont = solve_fbsde_continuation(p, (0.0, 0.25, 0.5, 1.0))
    assert cont.lambda_schedule == [0.0, 0.25, 0.5, 1.0]
    np.testing.assert_allclose(cont.backward.Y, pic.backward.Y, atol=1e-6)
    write_history_csv(cont, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("sweep,weighted_error,ratio,lambda")


def test_warm_start_saves_sweeps():
    p = coupled(0.5)
    cold = solve_fbsde_picard(p)
    warm = solve_fbsde_picard(p, start=cold)
    assert len(warm.history) < len(cold.history)


def test_failure_modes():
    p = coupled(0.5)
    with pytest.raises(NoConvergence) as info:
        solve_fbsde_picard(p, max_iters=2)
    assert info.value.solution is not None and not info.value.solution.converged
    sol = solve_fbsde_picard(p, max_iters=2, raise_on_failure=False)
    assert not sol.converged
    with pytest.raises(ValueError):
        solve_fbsde_picard(p, damping=0.0)
    with pytest.raises(ValueError):
        solve_fbsde_continuation(p, (0.5, 1.0))
    with pytest.raises(StepFloorReached):
        solve_fbsde_continuation(p, (0.0, 1.0), max_iters=2, floor_divisor=2)


def test_monotonicity_verifier_on_linear_system():
    # with b = -y and f = x the left side is -E|dy|^2 exactly
    p = FBSDEProblem(n=1, d=0, d0=0, grid=GRID, x0=0.0, b=lambda t, x, y, z, z0, mom, reg: -y,
                     f=lambda t, x, y, z, z0, mom, reg: x, numerics=NM)
    fn = Functionals(1.0, lambda t, dy, dz, dz0, reg: np.sum(dy * dy, axis=-1))
    rep = verify_domination_monotonicity(p, fn, samples=200, shift=0.0)
    assert rep.holds and rep.violations == 0
    flipped = replace(p, b=lambda t, x, y, z, z0, mom, reg: y)
    assert not verify_domination_monotonicity(flipped, fn, samples=200, shift=0.0).holds
