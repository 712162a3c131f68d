"""Euler simulation of conditional McKean-Vlasov SDEs over particle clouds.

A run consists of ``M`` scenarios.  Each scenario owns one common-noise path
and one regime path, and ``N`` particles whose empirical law stands for the
conditional law given the common noise.  Coefficients see the law only
through the within-scenario moment summary.

Arrays use the layout ``(node, scenario, particle, component)``.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import streams
from .grid import TimeGrid, trapezoid
from .measure import DimensionMismatch
from .regime import GeneratorMatrix, jump_martingale_ledger, simulate_regime_path, validate_generator

__all__ = [
    "TimeGrid", "NoiseBundle", "draw_noise", "MomentSummary", "CoefficientCallbacks",
    "ParticleEnsemble", "EnsembleBatch", "simulate_conditional_mkv_sde", "weighted_l2_profile",
    "horizon_for_tail", "NonFiniteState", "write_ensemble_csv", "DimensionMismatch",
]


class NonFiniteState(FloatingPointError):
    def __init__(self, node: int):
        super().__init__(f"non-finite state first seen at node {node}")
        self.node = node


@dataclass(frozen=True)
class NoiseBundle:
    """All randomness of a run, drawn once and reused across solver sweeps.

    ``dW`` is (n_steps, M, N, d), ``dW0`` is (n_steps, M, d0), ``states`` is
    (n_nodes, M) and ``dM`` holds the jump-martingale increments
    (n_steps, M, m0, m0).
    """

    grid: TimeGrid
    seed: int
    gen: GeneratorMatrix
    dW: np.ndarray
    dW0: np.ndarray
    regime_paths: tuple
    states: np.ndarray
    dM: np.ndarray
    jumped: np.ndarray

    @property
    def scenarios(self) -> int:
        return self.dW.shape[1]

    @property
    def particles(self) -> int:
        return self.dW.shape[2]

    @property
    def d(self) -> int:
        return self.dW.shape[3]

    @property
    def d0(self) -> int:
        return self.dW0.shape[2]


def draw_noise(grid: TimeGrid, scenarios: int, particles: int, d: int, d0: int, seed: int,
               gen: GeneratorMatrix | None = None, initial_regime: int = 0,
               threads: int = 1) -> NoiseBundle:
    """Draw every Brownian increment and regime path from per-slot streams.

    Particle ``p`` of scenario ``s`` always receives the same increments for a
    given seed, whatever the particle count, scenario count or thread count.
    """
    if scenarios < 1 or particles < 1:
        raise ValueError("need at least one scenario and one particle")
    gen = gen or validate_generator([[0.0]])
    K, sq = grid.n_steps, np.sqrt(grid.dt)
    dW = np.empty((K, scenarios, particles, d))
    dW0 = np.empty((K, scenarios, d0))

    def one_scenario(s):
        for p in range(particles):
            dW[:, s, p, :] = streams.stream(seed, streams.IDIOSYNCRATIC, s, p).standard_normal((K, d)) * sq
        dW0[:, s, :] = streams.stream(seed, streams.COMMON, s).standard_normal((K, d0)) * sq
        return simulate_regime_path(gen, initial_regime, grid, streams.stream(seed, streams.REGIME, s))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            paths = tuple(pool.map(one_scenario, range(scenarios)))
    else:
        paths = tuple(one_scenario(s) for s in range(scenarios))
    states = np.stack([p.states for p in paths], axis=1)
    dM = np.stack([jump_martingale_ledger(p, gen).increments for p in paths], axis=1)
    jumped = states[1:] != states[:-1]
    return NoiseBundle(grid, int(seed), gen, dW, dW0, paths, states, dM, jumped)


@dataclass(frozen=True)
class MomentSummary:
    """Within-scenario moments at node ``k``; means have shape (M, 1, .)."""

    k: int
    t: float
    mean: np.ndarray
    second: np.ndarray | None = None


def summarize(k: int, t: float, x: np.ndarray, second: bool = False) -> MomentSummary:
    mean = x.mean(axis=1, keepdims=True)
    sec = np.einsum("spi,spj->sij", x, x)[:, None] / x.shape[1] if second else None
    return MomentSummary(k, t, mean, sec)


Callback = Callable[[float, np.ndarray, MomentSummary, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoefficientCallbacks:
    """Drift ``b`` -> (M, N, n); diffusions ``sigma`` -> (M, N, d, n), ``sigma_tilde`` -> (M, N, d0, n).

    Each is called as ``f(t, x, moments, regime)`` with ``x`` of shape
    (M, N, n) and ``regime`` of shape (M,).  ``None`` means identically zero.
    Outputs only need to broadcast to the stated shapes.
    """

    b: Callback | None = None
    sigma: Callback | None = None
    sigma_tilde: Callback | None = None
    needs_second_moment: bool = False


@dataclass(frozen=True)
class ParticleEnsemble:
    scenario: int
    regime_path: object
    common_increments: np.ndarray
    states: np.ndarray


@dataclass(frozen=True)
class EnsembleBatch(Sequence):
    """Simulated paths of all scenarios plus the noise that produced them."""

    X: np.ndarray
    noise: NoiseBundle
    sigma_tilde: np.ndarray | None = None

    @property
    def grid(self) -> TimeGrid:
        return self.noise.grid

    def __len__(self) -> int:
        return self.X.shape[1]

    def __getitem__(self, s):
        if isinstance(s, slice):
            return [self[i] for i in range(*s.indices(len(self)))]
        return ParticleEnsemble(s, self.noise.regime_paths[s], self.noise.dW0[:, s], self.X[:, s])

    def conditional_mean(self) -> np.ndarray:
        return self.X.mean(axis=2, keepdims=True)


def _initial_states(x0, noise: NoiseBundle, n: int | None) -> np.ndarray:
    M, N = noise.scenarios, noise.particles
    if callable(x0):
        rows = [[np.asarray(x0(streams.stream(noise.seed, streams.INITIAL, s, p)), float).ravel()
                 for p in range(N)] for s in range(M)]
        return np.array(rows)
    arr = np.asarray(x0, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim == 1:
        return np.broadcast_to(arr, (M, N, arr.size)).copy()
    if arr.ndim == 2 and arr.shape[0] == N:
        return np.broadcast_to(arr, (M,) + arr.shape).copy()
    if arr.ndim == 3 and arr.shape[:2] == (M, N):
        return arr.copy()
    raise DimensionMismatch(f"initial states of shape {arr.shape} do not fit M={M}, N={N}")


def simulate_conditional_mkv_sde(cb: CoefficientCallbacks, x0, noise: NoiseBundle,
                                 keep_sigma_tilde: bool = False) -> EnsembleBatch:
    """Euler scheme ``X+ = X + b dt + sigma dW + sigma_tilde dW0`` per particle.

    Moments are recomputed within each scenario at every node (the
    synchronisation barrier).  Coefficients use the regime at the left node.
    """
    grid = noise.grid
    X0 = _initial_states(x0, noise, None)
    M, N, n = X0.shape
    d, d0 = noise.d, noise.d0
    X = np.empty((grid.n_nodes, M, N, n))
    X[0] = X0
    if not np.all(np.isfinite(X0)):
        raise NonFiniteState(0)
    keep = np.zeros((grid.n_steps, M, N, d0, n)) if keep_sigma_tilde else None
    dt = grid.dt
    for k in range(grid.n_steps):
        t = float(grid.nodes[k])
        x = X[k]
        mom = summarize(k, t, x, cb.needs_second_moment)
        reg = noise.states[k]
        step = np.zeros_like(x)
        if cb.b is not None:
            step += np.broadcast_to(cb.b(t, x, mom, reg), x.shape) * dt
        if cb.sigma is not None:
            sig = np.broadcast_to(cb.sigma(t, x, mom, reg), (M, N, d, n))
            step += np.einsum("spjn,spj->spn", sig, noise.dW[k])
        if cb.sigma_tilde is not None:
            sgt = np.broadcast_to(cb.sigma_tilde(t, x, mom, reg), (M, N, d0, n))
            step += np.einsum("spjn,sj->spn", sgt, noise.dW0[k])
            if keep is not None:
                keep[k] = sgt
        X[k + 1] = x + step
        if not np.all(np.isfinite(X[k + 1])):
            raise NonFiniteState(k + 1)
    return EnsembleBatch(X, noise, keep)


def weighted_l2_profile(batch: EnsembleBatch, kappa: float) -> tuple[np.ndarray, float]:
    """``e^{kappa s} E|X_s|^2`` per node (scenario and particle average) and its integral."""
    grid = batch.grid
    sq = np.einsum("kspi,kspi->k", batch.X, batch.X) / (batch.X.shape[1] * batch.X.shape[2])
    profile = np.exp(kappa * grid.nodes) * sq
    return profile, float(trapezoid(profile, grid.dt))


def horizon_for_tail(t0: float, kappa: float, kappa_bar: float, tail_tol: float = 1e-3) -> float:
    """Smallest T with ``e^{(kappa - kappa_bar)(T - t0)} <= tail_tol``."""
    gap = kappa_bar - kappa
    if gap <= 0:
        raise ValueError("kappa must lie below kappa_bar for the tail bound to decay")
    return t0 + np.log(1.0 / tail_tol) / gap


def write_ensemble_csv(batch: EnsembleBatch, target) -> None:
    X, nodes = batch.X, batch.grid.nodes
    n = X.shape[3]
    with Path(target).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "scenario", "particle"] + [f"x{i}" for i in range(n)])
        for k, t in enumerate(nodes):
            for s in range(X.shape[1]):
                for p in range(X.shape[2]):
                    w.writerow([repr(float(t)), s, p] + [repr(float(v)) for v in X[k, s, p]])
