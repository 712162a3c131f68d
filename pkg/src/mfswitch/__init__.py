"""Infinite-horizon mean-field FBSDEs with regime switching and common noise.

Particle simulation, regression-based backward solvers, coupled
forward-backward iteration, and the linear-quadratic control and game
problems built on them.
"""

__version__ = "0.1.0"

from .coeffs import (GameCoefficients, LQCoefficients, check_game_structure, check_positive_definiteness,
                     compute_game_kappa_bounds, compute_kappa_bounds, eliminate_cross_terms, make_game, make_lq)
from .coupled import FBSDEProblem, NoConvergence, Numerics, solve_fbsde_continuation, solve_fbsde_picard
from .forward import draw_noise, simulate_conditional_mkv_sde
from .game import best_response, nash_deviation_test, project_profile, solve_game_fixed_point
from .grid import TimeGrid
from .lq import evaluate_cost, riccati_scalar_oracle, solve_control_problem
from .regime import simulate_regime_path, validate_generator

__all__ = [
    "GameCoefficients", "LQCoefficients", "check_game_structure", "check_positive_definiteness",
    "compute_game_kappa_bounds", "compute_kappa_bounds", "eliminate_cross_terms", "make_game", "make_lq",
    "FBSDEProblem", "NoConvergence", "Numerics", "solve_fbsde_continuation", "solve_fbsde_picard",
    "draw_noise", "simulate_conditional_mkv_sde", "best_response", "nash_deviation_test", "project_profile",
    "solve_game_fixed_point", "TimeGrid", "evaluate_cost", "riccati_scalar_oracle", "solve_control_problem",
    "simulate_regime_path", "validate_generator",
]
