"""Short tour: a scalar control problem against its Riccati gain, then a two-regime game.

Run with ``python3 demos/walkthrough.py``; takes well under a minute on one core.
"""

import time

import numpy as np

from mfswitch import (Numerics, check_game_structure, make_game, make_lq, riccati_scalar_oracle,
                      solve_control_problem, solve_game_fixed_point, validate_generator)
from mfswitch.lq import gain_estimate


def scalar_control() -> None:
    blocks = dict(A=-1.0, B=0.5, C=0.3, D=0.1, M=0.2, Q=1.0, R=1.0)
    c = make_lq(kappa_star=10.0, **blocks)
    nm = Numerics(dt=0.02, particles=256, scenarios=8, seed=7, tol=1e-5)
    started = time.perf_counter()
    sol = solve_control_problem(c, 1.0, numerics=nm, kappa=-0.5, T=4.0)
    gain = gain_estimate(sol.u, sol.X, sol.forward.grid)
    _, oracle = riccati_scalar_oracle(-1.0, 0.5, 0.3, 0.1, 0.2, 0.0, 1.0, 1.0, -0.5)
    print("scalar control problem")
    print(f"  sweeps {len(sol.fbsde.history)}, median contraction {np.median(sol.fbsde.ratios):.3f}")
    print(f"  fitted feedback gain {gain:.4f}, stationary Riccati gain {oracle:.4f}")
    print(f"  cost {sol.cost.total:.5f} +- {sol.cost.se:.5f}  ({time.perf_counter() - started:.1f}s)")


def switching_game() -> None:
    lq = make_lq(m0=2, kappa_star=10.0, A=[[[-1.0]], [[-0.6]]], B=0.5, C=0.3, D=0.1, Q=1.0, Qbar=0.5,
                 S=0.2, R=1.0, Rbar=0.5, b=[0.1], q=[0.05], r=[0.1])
    g = make_game(lq, S1bar=0.1, S2bar=0.1, k=0.0)
    print("two-regime game")
    print(f"  structure checks pass: {check_game_structure(g).passed}")
    nm = Numerics(dt=0.04, particles=128, scenarios=8, seed=3, tol=1e-4)
    rep = solve_game_fixed_point(g, 1.0, numerics=nm, kappa=-0.5, T=4.0,
                                 generator=validate_generator([[-1.0, 1.0], [2.0, -2.0]]), deviations=10)
    print(f"  fixed-point gap {rep.fixed_point_gap:.2e}, consistency gap {rep.consistency_gap:.2e}")
    print(f"  deviations beating the equilibrium by more than 2 SE: {len(rep.nash.failures)} of {len(rep.nash.rows)}")
    mean0 = rep.profile.X[:, :, 0].mean(axis=1)
    print(f"  population mean state at t=0, 1, 2: {mean0[0]:.3f}, {mean0[25]:.3f}, {mean0[50]:.3f}")


if __name__ == "__main__":
    scalar_control()
    switching_game()
