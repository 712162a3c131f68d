"""Empirical measures: moments and the one-dimensional Wasserstein-2 distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionMismatch(ValueError):
    pass


class NonUniformUnsupported(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted atoms ``points[i]`` (shape (N, dim)) with weights summing to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must be a non-empty (N, dim) array")
        n = pts.shape[0]
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise DimensionMismatch(f"{n} points but weights of shape {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


def conditional_mean(mu: EmpiricalMeasure) -> np.ndarray:
    return mu.weights @ mu.points


def second_moment(mu: EmpiricalMeasure) -> float:
    return float(mu.weights @ np.einsum("ij,ij->i", mu.points, mu.points))


def resample_uniform(mu: EmpiricalMeasure, size: int, rng: np.random.Generator) -> EmpiricalMeasure:
    """Multinomial resampling onto ``size`` equally weighted atoms."""
    idx = rng.choice(mu.size, size=size, p=mu.weights)
    return EmpiricalMeasure(mu.points[idx])


def wasserstein2_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W2 between equal-count uniform one-dimensional empirical measures.

    The monotone (sorted) coupling is optimal in one dimension, so the value
    is the root-mean-square difference of the order statistics.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise DimensionMismatch("wasserstein2_1d needs one-dimensional measures")
    if mu.size != nu.size or not (mu.is_uniform() and nu.is_uniform()):
        raise NonUniformUnsupported("need equal-count uniform atoms; resample first")
    a = np.sort(mu.points[:, 0])
    b = np.sort(nu.points[:, 0])
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class E1Report:
    lhs: float
    mid: float
    rhs: float
    holds: bool


def check_e1_inequality(xi1, xi2, slack: float = 1e-12) -> E1Report:
    """Check ``|E xi1 - E xi2| <= W2(law xi1, law xi2) <= (E|xi1 - xi2|^2)^(1/2)``."""
    x = np.asarray(xi1, dtype=float)
    y = np.asarray(xi2, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise DimensionMismatch("need paired one-dimensional samples of equal length")
    lhs = abs(x.mean() - y.mean())
    mid = wasserstein2_1d(EmpiricalMeasure(x), EmpiricalMeasure(y))
    rhs = float(np.sqrt(np.mean((x - y) ** 2)))
    scale = max(1.0, rhs)
    return E1Report(lhs, mid, rhs, bool(lhs <= mid + slack * scale and mid <= rhs + slack * scale))
