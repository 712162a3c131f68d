"""Finite-state continuous-time Markov chain driving the coefficient regimes.

Regimes are labelled ``0..m0-1``.  Paths are simulated exactly from
exponential holding times and then read off on a :class:`TimeGrid` with the
right-continuous convention; the exact jump instants are kept so that the
compensator of the jump martingales uses exact occupation times.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import TimeGrid


class NotSquare(ValueError):
    pass


class NegativeIntensity(ValueError):
    pass


class RowSumNonzero(ValueError):
    pass


class StateOutOfRange(ValueError):
    pass


class NoOccupationTime(UserWarning):
    """A regime was never visited, so its row of rates is undefined."""


@dataclass(frozen=True)
class GeneratorMatrix:
    """Validated intensity matrix ``a`` with ``a[i, j]`` the rate of i -> j."""

    a: np.ndarray

    @property
    def m0(self) -> int:
        return self.a.shape[0]

    def exit_rate(self, i: int) -> float:
        return float(-self.a[i, i])

    def jump_distribution(self, i: int) -> np.ndarray:
        rate = self.exit_rate(i)
        p = np.where(np.arange(self.m0) == i, 0.0, self.a[i])
        return p / rate if rate > 0 else p

    def transition_matrix(self, dt: float) -> np.ndarray:
        from scipy.linalg import expm

        return expm(self.a * dt)


def validate_generator(raw, tol: float = 1e-12) -> GeneratorMatrix:
    a = np.array(raw, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise NotSquare(f"generator must be a non-empty square matrix, got shape {a.shape}")
    off = a[~np.eye(a.shape[0], dtype=bool)]
    if np.any(off < 0):
        raise NegativeIntensity("off-diagonal intensities must be nonnegative")
    rows = a.sum(axis=1)
    bad = np.flatnonzero(np.abs(rows) > tol)
    if bad.size:
        raise RowSumNonzero(f"row {bad[0]} sums to {rows[bad[0]]:.3g}")
    a.setflags(write=False)
    return GeneratorMatrix(a)


@dataclass(frozen=True)
class RegimePath:
    """One chain trajectory: exact jumps plus right-continuous node values."""

    grid: TimeGrid
    initial: int
    states: np.ndarray
    jump_times: np.ndarray
    jump_pairs: np.ndarray

    def state_at(self, t) -> np.ndarray:
        seq = np.concatenate([[self.initial], self.jump_pairs[:, 1]]).astype(np.int64)
        return seq[np.searchsorted(self.jump_times, t, side="right")]

    def occupation_at(self, times, m0: int) -> np.ndarray:
        """Cumulative time spent in each regime on [t0, t]; shape (len(times), m0)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        starts = np.concatenate([[self.grid.t0], self.jump_times])
        seq = np.concatenate([[self.initial], self.jump_pairs[:, 1]]).astype(np.int64)
        lengths = np.diff(np.concatenate([starts, [np.inf]]))
        before = np.zeros((starts.size, m0))
        if starts.size > 1:
            inc = np.zeros((starts.size - 1, m0))
            inc[np.arange(starts.size - 1), seq[:-1]] = lengths[:-1]
            before[1:] = np.cumsum(inc, axis=0)
        seg = np.searchsorted(self.jump_times, times, side="right")
        out = before[seg].copy()
        out[np.arange(times.size), seq[seg]] += times - starts[seg]
        return out

    def sojourns(self) -> tuple[np.ndarray, np.ndarray]:
        """Completed holding times and the regime of each (censored last one dropped)."""
        starts = np.concatenate([[self.grid.t0], self.jump_times])
        return np.diff(starts), self.jump_pairs[:, 0] if self.jump_times.size else np.zeros(0, int)


def simulate_regime_path(gen: GeneratorMatrix, initial: int, grid: TimeGrid,
                         rng: np.random.Generator) -> RegimePath:
    if not 0 <= initial < gen.m0:
        raise StateOutOfRange(f"initial regime {initial} not in 0..{gen.m0 - 1}")
    horizon = grid.horizon
    cum = [np.cumsum(gen.jump_distribution(i)) for i in range(gen.m0)]
    t, s = grid.t0, int(initial)
    times, pairs = [], []
    while True:
        rate = gen.exit_rate(s)
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t > horizon:
            break
        j = int(np.searchsorted(cum[s], rng.random() * cum[s][-1], side="right"))
        j = min(j, gen.m0 - 1)
        if j == s:  # only reachable through rounding at the top of the cdf
            j = int(np.flatnonzero(gen.jump_distribution(s) > 0)[-1])
        times.append(t)
        pairs.append((s, j))
        s = j
    jump_times = np.array(times, dtype=float)
    jump_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    seq = np.concatenate([[initial], jump_pairs[:, 1]]).astype(np.int64)
    states = seq[np.searchsorted(jump_times, grid.nodes, side="right")]
    return RegimePath(grid, int(initial), states, jump_times, jump_pairs)


@dataclass(frozen=True)
class MartingaleLedger:
    """Per-interval increments of ``M_ij = [M_ij] - <M_ij>``.

    Arrays have shape ``(n_steps, m0, m0)``; diagonal entries are zero since a
    jump always changes the regime.
    """

    counting: np.ndarray
    compensator: np.ndarray

    @property
    def increments(self) -> np.ndarray:
        return self.counting - self.compensator

    def cumulative(self) -> np.ndarray:
        """``M_ij`` at every node, starting from 0; shape (n_nodes, m0, m0)."""
        inc = self.increments
        out = np.zeros((inc.shape[0] + 1,) + inc.shape[1:])
        np.cumsum(inc, axis=0, out=out[1:])
        return out

    def total(self) -> np.ndarray:
        return self.increments.sum(axis=0)


def jump_martingale_ledger(path: RegimePath, gen: GeneratorMatrix) -> MartingaleLedger:
    m0 = gen.m0
    used = np.concatenate([[path.initial], path.jump_pairs.ravel()])
    if used.size and (used.min() < 0 or used.max() >= m0):
        raise StateOutOfRange("path visits a regime outside the generator's state space")
    grid = path.grid
    counting = np.zeros((grid.n_steps, m0, m0))
    if path.jump_times.size:
        k = grid.interval_of(path.jump_times)
        np.add.at(counting, (k, path.jump_pairs[:, 0], path.jump_pairs[:, 1]), 1.0)
    occ = np.diff(path.occupation_at(grid.nodes, m0), axis=0)
    rates = np.where(np.eye(m0, dtype=bool), 0.0, gen.a)
    compensator = occ[:, :, None] * rates[None, :, :]
    return MartingaleLedger(counting, compensator)


@dataclass(frozen=True)
class EmpiricalGenerator:
    rates: np.ndarray
    se: np.ndarray
    counts: np.ndarray
    occupation: np.ndarray
    undefined: np.ndarray


def empirical_generator(paths: Sequence[RegimePath], m0: int | None = None) -> EmpiricalGenerator:
    """Occupation-time estimator ``N_ij / T_i`` with Poisson standard errors."""
    if len(paths) == 0:
        raise ValueError("need at least one path")
    if m0 is None:
        m0 = 1 + max(int(max(p.initial, p.jump_pairs.max(initial=0))) for p in paths)
    counts = np.zeros((m0, m0))
    occupation = np.zeros(m0)
    for p in paths:
        if p.jump_times.size:
            np.add.at(counts, (p.jump_pairs[:, 0], p.jump_pairs[:, 1]), 1.0)
        occupation += p.occupation_at([p.grid.horizon], m0)[0]
    undefined = occupation <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = counts / occupation[:, None]
        se = np.sqrt(counts) / occupation[:, None]
        np.fill_diagonal(rates, 0.0)
        np.fill_diagonal(rates, -rates.sum(axis=1))
        np.fill_diagonal(se, np.sqrt(counts.sum(axis=1)) / occupation)
    rates[undefined] = np.nan
    se[undefined] = np.nan
    if undefined.any():
        warnings.warn(f"regimes {np.flatnonzero(undefined).tolist()} never visited; rows undefined",
                      NoOccupationTime, stacklevel=2)
    return EmpiricalGenerator(rates, se, counts, occupation, undefined)


def write_path_csv(path: RegimePath, target) -> None:
    with Path(target).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "regime"])
        for t, s in zip(path.grid.nodes, path.states):
            w.writerow([repr(float(t)), int(s)])
