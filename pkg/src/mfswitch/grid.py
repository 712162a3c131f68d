"""Uniform time grid shared by the forward and backward solvers."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Nodes ``t0 + k*dt`` for ``k = 0..n_steps``.

    ``n_steps = round((T - t0)/dt)``; the last node is ``t0 + n_steps*dt``,
    which differs from ``T`` only when ``T - t0`` is not a multiple of ``dt``.
    """

    t0: float
    T: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T > self.t0:
            raise ValueError(f"T must exceed t0, got t0={self.t0}, T={self.T}")
        if self.n_steps < 1:
            raise ValueError("grid needs at least one step")

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_nodes)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    def interval_of(self, times) -> np.ndarray:
        """Index k of the interval (t_k, t_{k+1}] containing each time."""
        k = np.ceil((np.asarray(times, dtype=float) - self.t0) / self.dt).astype(np.int64) - 1
        return np.clip(k, 0, self.n_steps - 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.horizon, self.dt / factor)


def trapezoid(values: np.ndarray, dt: float, axis: int = 0) -> np.ndarray:
    """Trapezoid rule on a uniform grid along ``axis``."""
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    if values.shape[0] < 2:
        return np.zeros(values.shape[1:])
    return dt * (values[1:-1].sum(axis=0) + 0.5 * (values[0] + values[-1]))
