import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import RICCATI
from mfswitch.coeffs import make_lq
from mfswitch.coupled import Numerics
from mfswitch.forward import draw_noise
from mfswitch.grid import TimeGrid
from mfswitch.lq import (ControlProcess, GridMismatch, NoPSDRoot, PDViolation, evaluate_cost,
                         refined_stationarity_residual, riccati_scalar_oracle, simulate_state,
                         solve_control_problem)


@pytest.fixture(scope="module")
def solved(riccati_coeffs, small_numerics):
    return solve_control_problem(riccati_coeffs, 1.0, 0, small_numerics, -0.5, 3.0)


@given(st.floats(-2, 0.5), st.floats(0.1, 2), st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0, 0.5),
       st.floats(0, 0.5), st.floats(0.1, 3), st.floats(0.2, 3))
@settings(max_examples=60, deadline=None)
def test_riccati_root_solves_the_scalar_equation(a, b, c, d, m, n, q, r):
    kappa = -0.5
    try:
        p, gain = riccati_scalar_oracle(a, b, c, d, m, n, q, r, kappa)
    except NoPSDRoot:
        return
    beta, delta = b + c * d + m * n, d * d + n * n
    resid = (2 * a + kappa + c * c + m * m) * p - p * p * beta * beta / (r + p * delta) + q
    assert p > 0
    assert abs(resid) <= 1e-9 * max(1.0, p * p)
    assert gain == pytest.approx(p * beta / (r + p * delta))


def test_riccati_classic_case():
    # a=0, b=1, q=r=1, no noise, no discount: p^2 = 1
    p, gain = riccati_scalar_oracle(0, 1, 0, 0, 0, 0, 1, 1, 0)
    assert p == pytest.approx(1.0) and gain == pytest.approx(1.0)
    with pytest.raises(NoPSDRoot):
        riccati_scalar_oracle(0, 1, 0, 0, 0, 0, 1, 0, 0)


def test_solution_is_a_linear_feedback(solved):
    R = RICCATI
    _, oracle = riccati_scalar_oracle(R["A"], R["B"], R["C"], R["D"], R["M"], R["N"], R["Q"], R["R"], -0.5)
    mid = solved.forward.grid.n_nodes // 4
    ratio = -solved.u.u[mid] / solved.X[mid]
    assert np.median(ratio) == pytest.approx(oracle, rel=0.1)
    assert solved.fbsde.converged
    assert solved.cost.total > 0 and solved.cost.se > 0


def test_cost_is_quadratic_in_the_control(riccati_coeffs, solved):
    # from x0 = 0 the state is affine in the control, so J(2u) - J(0) = 4 (J(u) - J(0))
    noise = solved.forward.noise

    def J(u):
        return evaluate_cost(riccati_coeffs, u, simulate_state(riccati_coeffs, u, 0.0, noise), -0.5).total

    j0 = J(ControlProcess(np.zeros_like(solved.u.u)))
    assert J(solved.u.scaled(2.0)) - j0 == pytest.approx(4 * (J(solved.u) - j0), rel=1e-6)


def test_optimum_beats_perturbations(riccati_coeffs, solved):
    noise = solved.forward.noise
    for eps in (-0.2, 0.2):
        u = ControlProcess(solved.u.u * (1 + eps))
        assert evaluate_cost(riccati_coeffs, u, simulate_state(riccati_coeffs, u, 1.0, noise), -0.5).total \
            > solved.cost.total


def test_cross_term_problem_solves_and_refined_residual_is_small(small_numerics):
    c = make_lq(A=-1.0, B=0.5, C=0.3, Q=1.0, S=0.3, R=1.0, Qbar=0.2, Rbar=0.3, q=[0.1], r=[0.1], kappa_star=10.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = solve_control_problem(c, 1.0, 0, small_numerics, -0.5, 2.0)
    rep = refined_stationarity_residual(c, sol, 1.0, -0.5, small_numerics, factor=2)
    assert rep.weighted_norm < 0.05
    assert rep.per_node.shape[0] == 2 * sol.forward.grid.n_steps + 1


def test_errors(riccati_coeffs, small_numerics):
    with pytest.raises(PDViolation):
        solve_control_problem(make_lq(Q=1.0, R=1.0, S=2.0), 1.0, 0, small_numerics)
    sol_noise = draw_noise(TimeGrid(0.0, 1.0, 0.1), 1, 2, 1, 1, seed=0)
    with pytest.raises(GridMismatch):
        simulate_state(riccati_coeffs, ControlProcess(np.zeros((3, 1, 2, 1))), 1.0, sol_noise)
    with pytest.raises(ValueError):
        solve_control_problem(riccati_coeffs, 1.0, 0, Numerics(dt=0.1, particles=4, scenarios=1, seed=0),
                              kappa=-0.5, method="newton")
