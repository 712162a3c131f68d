"""Backward regression Monte Carlo for conditional McKean-Vlasov BSDEs.

One step from node ``k+1`` to ``k``:

1. Remove the regime-jump part of ``Y[k+1]``.  A pooled cross-scenario
   "Markov fit" ``yhat(x, m, regime)`` of ``Y[k+1]`` on polynomial features of
   the state plus the scenario mean ``m`` gives the jump loadings
   ``K_ij = yhat(., j) - yhat(., i)`` and the compensated correction.
2. ``Z0`` is the pathwise derivative of the Markov fit along the common
   noise: ``dX/dW0 = sigma_tilde`` and ``dm/dW0 = E0 sigma_tilde``.
3. Within each scenario the corrected ``Y[k+1]`` is regressed on
   ``[phi(X_k), phi(X_k) * dW_k]``; the first block is the conditional
   expectation (given the scenario's common increment), the second is ``Z``.
4. ``Y_k = fit - Z0 dW0 + f dt`` with one (or more) fixed-point sweeps.

Conditional expectations given the common noise are within-scenario
particle averages.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .forward import EnsembleBatch
from .grid import TimeGrid


class NonFinite(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# polynomial features

def _monomials(n: int, degree: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = [()]
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(n), deg))
    return out


def poly_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Monomials of total degree <= ``degree`` (constant first); shape x.shape[:-1] + (p,)."""
    cols = []
    for mono in _monomials(x.shape[-1], degree):
        col = np.ones(x.shape[:-1])
        for i in mono:
            col = col * x[..., i]
        cols.append(col)
    return np.stack(cols, axis=-1)


def poly_jacobian(x: np.ndarray, degree: int) -> np.ndarray:
    """Derivative of :func:`poly_features` in x; shape x.shape[:-1] + (p, n)."""
    n = x.shape[-1]
    monos = _monomials(n, degree)
    jac = np.zeros(x.shape[:-1] + (len(monos), n))
    for c, mono in enumerate(monos):
        for pos, i in enumerate(mono):
            term = np.ones(x.shape[:-1])
            for q, j in enumerate(mono):
                if q != pos:
                    term = term * x[..., j]
            jac[..., c, i] += term
    return jac


def _markov_features(x, m, degree):
    """[poly(x), m] with m broadcast against x."""
    return np.concatenate([poly_features(x, degree), np.broadcast_to(m, x.shape)], axis=-1)


def lstsq_batched(A: np.ndarray, Y: np.ndarray, rcond: float = 1e-11):
    """Least squares per leading batch index via the normalised Gram matrix.

    ``A`` is (B, R, P), ``Y`` is (B, R, Q).  Returns coefficients (B, P, Q)
    and the Gram condition number per batch.  Rank-deficient directions are
    cut at ``rcond`` relative to the largest eigenvalue, which gives the
    minimum-norm solution on the remaining span.
    """
    scale = np.sqrt(np.mean(A * A, axis=1))
    scale[scale == 0] = 1.0
    As = A / scale[:, None, :]
    G = np.einsum("brp,brq->bpq", As, As)
    rhs = np.einsum("brp,brq->bpq", As, Y)
    coef = np.linalg.pinv(G, rcond=rcond, hermitian=True) @ rhs
    eig = np.linalg.eigvalsh(G)
    top = eig[:, -1]
    bottom = np.maximum(eig[:, 0], top * 1e-300 + 1e-300)
    return coef / scale[:, :, None], top / bottom


# --------------------------------------------------------------------------
# containers

@dataclass(frozen=True)
class JointMoments:
    """Within-scenario means of (X, Y, Z, Z0) at node ``k``; each (M, 1, ...)."""

    k: int
    t: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    z0: np.ndarray


DriverFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray, JointMoments, np.ndarray],
                    np.ndarray]


@dataclass(frozen=True)
class DriverCallback:
    """``f(t, x, y, z, z0, moments, regime) -> (M, N, n)``; ``None`` is the zero driver."""

    f: DriverFn | None = None
    depends_on_theta: bool = True


@dataclass(frozen=True)
class MarkovFits:
    """Pooled fits ``value ~ [poly(x), m] @ coef`` per node and regime.

    ``y`` has shape (n_nodes, m0, p, n), ``z`` (n_nodes, m0, p, d*n) and
    ``z0`` (n_nodes, m0, p, d0*n).
    """

    degree: int
    y: np.ndarray
    z: np.ndarray
    z0: np.ndarray

    def _eval(self, coef, x, m, regime):
        feats = _markov_features(x, m, self.degree)
        return np.einsum("spc,scq->spq", feats, coef[np.asarray(regime)])

    def value(self, k: int, x, m, regime) -> np.ndarray:
        return self._eval(self.y[k], x, m, regime)

    def theta(self, k: int, x, m, regime):
        """(y, z, z0) at node ``k`` for states ``x`` (M, N, n), means ``m`` (M, 1, n), regimes (M,)."""
        n = x.shape[-1]
        y = self._eval(self.y[k], x, m, regime)
        z = self._eval(self.z[k], x, m, regime)
        z0 = self._eval(self.z0[k], x, m, regime)
        return y, z.reshape(z.shape[:-1] + (-1, n)), z0.reshape(z0.shape[:-1] + (-1, n))


def _markov_jacobians(coef, x, degree):
    """Jacobians of the fit in x and in m; coef (M, p, q), x (M, N, n)."""
    n = x.shape[-1]
    p = coef.shape[-2] - n
    jac = poly_jacobian(x, degree)
    jx = np.einsum("scpn,spq->scqn", jac, coef[:, :p])
    jm = np.swapaxes(coef[:, p:], -1, -2)
    return jx, jm


@dataclass(frozen=True)
class RegressionDiagnostics:
    cond: np.ndarray
    r2: np.ndarray
    downgraded: np.ndarray

    @property
    def any_downgraded(self) -> bool:
        return bool(self.downgraded.any())


@dataclass(frozen=True)
class BackwardSolution:
    """Backward trajectories on the forward grid.

    ``Y`` is (n_nodes, M, N, n); ``Z`` (n_nodes, M, N, d, n) and ``Z0``
    (n_nodes, M, N, d0, n) with the last node repeating the last interval;
    ``K`` is (n_steps, M, N, m0, n): the loading of ``Y`` on ``M_{i j}`` with
    ``i`` the regime at the left node, for each target ``j``.
    """

    grid: TimeGrid
    Y: np.ndarray
    Z: np.ndarray
    Z0: np.ndarray
    K: np.ndarray
    terminal: np.ndarray
    diagnostics: RegressionDiagnostics
    markov: MarkovFits

    def jump_term(self, dM: np.ndarray, states: np.ndarray) -> np.ndarray:
        """``sum_j K_ij dM_ij`` per interval with ``i`` the left regime; (n_steps, M, N, n)."""
        K = self.K.shape[0]
        rows = dM[np.arange(K)[:, None], np.arange(dM.shape[1])[None, :], states[:-1]]
        return np.einsum("ksqjn,ksj->ksqn", self.K, rows)


def _fit_markov(values, x, m, states_k, m0, degree, min_scenarios, previous, rcond):
    """Pooled fit per regime.

    Regimes seen in at least ``min_scenarios`` scenarios get their own fit.
    Rarer regimes get their own intercept with slopes shared across all
    scenarios.  Regimes absent at this node keep their fit from the later
    node, shifted by the average change of the fits of the present regimes.
    """
    M, N, q = values.shape
    feats = _markov_features(x, m, degree)
    P = feats.shape[-1]
    counts = np.bincount(states_k, minlength=m0)
    out = np.empty((m0, P, q))
    rich = counts >= min(min_scenarios, M)
    for j in np.flatnonzero(rich):
        sel = states_k == j
        coef, _ = lstsq_batched(feats[sel].reshape(1, -1, P), values[sel].reshape(1, -1, q), rcond)
        out[j] = coef[0]
    rare = (counts > 0) & ~rich
    if rare.any():
        dummies = np.eye(m0)[states_k][:, None, :].repeat(N, axis=1)
        joint = np.concatenate([dummies, feats[..., 1:]], axis=-1)
        coef, _ = lstsq_batched(joint.reshape(1, -1, joint.shape[-1]), values.reshape(1, -1, q), rcond)
        for j in np.flatnonzero(rare):
            out[j, 0] = coef[0, j]
            out[j, 1:] = coef[0, m0:]
    absent = counts == 0
    if absent.any():
        present = np.flatnonzero(~absent)
        if previous is None:
            w = counts[present] / counts[present].sum()
            fill = np.einsum("j,jpq->pq", w, out[present])
            out[absent] = fill
        else:
            w = counts[present] / counts[present].sum()
            shift = np.einsum("j,jpq->pq", w, out[present] - previous[present])
            out[absent] = previous[absent] + shift
    return out


def _regime_free_fit(values, x, m, m0, degree, rcond):
    feats = _markov_features(x, m, degree)
    P, q = feats.shape[-1], values.shape[-1]
    coef, _ = lstsq_batched(feats.reshape(1, -1, P), values.reshape(1, -1, q), rcond)
    return np.broadcast_to(coef[0], (m0, P, q)).copy()


def solve_mkv_bsde(driver: DriverCallback, forward: EnsembleBatch, terminal=None, basis_degree: int = 1,
                   inner_sweeps: int = 1, inner_tol: float | None = None, regime_free: bool = False,
                   cond_threshold: float = 1e10, rcond: float = 1e-11, min_scenarios: int = 3,
                   n: int | None = None) -> BackwardSolution:
    """Solve ``dY = -f dt + Z dW + Z0 dW0 + K dM`` backwards from ``Y_T = terminal``.

    ``regime_free`` declares that the driver and terminal value do not depend
    on the regime; the jump correction is then skipped and ``K`` is exactly 0.
    ``inner_tol`` switches the implicit step from a fixed number of sweeps to
    iteration until the sup-change falls below the tolerance.
    """
    noise = forward.noise
    grid = forward.grid
    X = forward.X
    n_nodes, M, N, nx = X.shape
    n = nx if n is None else n
    d, d0 = noise.d, noise.d0
    m0 = noise.gen.m0
    dt = grid.dt
    states = noise.states
    rates = np.where(np.eye(m0, dtype=bool), 0.0, noise.gen.a)
    live = rates > 0
    trans = noise.gen.transition_matrix(dt)
    if m0 == 1 or not live.any():
        regime_free = regime_free or m0 == 1
    term = np.zeros((M, N, n)) if terminal is None else np.broadcast_to(np.asarray(terminal, float), (M, N, n)).copy()
    if not np.all(np.isfinite(term)):
        raise NonFinite("terminal value is not finite")

    Y = np.empty((n_nodes, M, N, n))
    Z = np.zeros((n_nodes, M, N, d, n))
    Z0 = np.zeros((n_nodes, M, N, d0, n))
    Kload = np.zeros((grid.n_steps, M, N, m0, n))
    means = X.mean(axis=2, keepdims=True)
    P_markov = poly_features(np.zeros((1, nx)), basis_degree).shape[-1] + nx
    fy = np.zeros((n_nodes, m0, P_markov, n))
    fz = np.zeros((n_nodes, m0, P_markov, d * n))
    fz0 = np.zeros((n_nodes, m0, P_markov, d0 * n))
    conds = np.zeros(grid.n_steps)
    r2 = np.zeros(grid.n_steps)

    def fit(values, k, previous=None):
        if values.shape[-1] == 0:
            return np.zeros((m0, P_markov, 0))
        if regime_free:
            return _regime_free_fit(values, X[k], means[k], m0, basis_degree, rcond)
        return _fit_markov(values, X[k], means[k], states[k], m0, basis_degree, min_scenarios, previous, rcond)

    Y[-1] = term
    fy[-1] = fit(term, n_nodes - 1)
    sid = np.arange(M)
    sgt = forward.sigma_tilde

    for k in range(grid.n_steps - 1, -1, -1):
        t = float(grid.nodes[k])
        xk, mk = X[k], means[k]
        ik = states[k]
        target = Y[k + 1]

        if not regime_free:
            coef_next = fy[k + 1]
            x1, m1 = X[k + 1], means[k + 1]
            feats1 = _markov_features(x1, m1, basis_degree)
            by_regime = np.einsum("spc,jcq->sjpq", feats1, coef_next)       # (M, m0, N, n)
            own = by_regime[sid, states[k + 1]]
            expected = np.einsum("sj,sjpq->spq", trans[ik], by_regime)
            target = target - own + expected
            feats0 = _markov_features(xk, mk, basis_degree)
            here = np.einsum("spc,jcq->spjq", feats0, coef_next)             # (M, N, m0, n)
            Kk = here - here[sid, :, ik][:, :, None, :]
            Kk = Kk * live[ik][:, None, :, None]
            Kload[k] = Kk

        # common-noise loading by pathwise differentiation of the Markov fit
        z0k = np.zeros((M, N, d0, n))
        if sgt is not None and np.any(sgt[k]):
            coef_next = fy[k + 1]
            weights = np.eye(m0)[ik] if regime_free else trans[ik]
            msg = sgt[k].mean(axis=1)                                           # (M, d0, nx)
            for j in range(m0):
                if not np.any(weights[:, j]):
                    continue
                jx, jm = _markov_jacobians(np.broadcast_to(coef_next[j], (M,) + coef_next[j].shape),
                                           xk, basis_degree)
                contrib = np.einsum("spqn,spjn->spjq", jx, sgt[k]) + np.einsum("sqn,sjn->sjq", jm, msg)[:, None]
                z0k += weights[:, j][:, None, None, None] * contrib

        phi = poly_features(xk, basis_degree)
        dw = noise.dW[k]
        design = np.concatenate([phi] + [phi * dw[:, :, j:j + 1] for j in range(d)], axis=-1)
        coef, cond = lstsq_batched(design, target, rcond)
        p = phi.shape[-1]
        base = np.einsum("spc,scq->spq", phi, coef[:, :p])
        zk = np.stack([np.einsum("spc,scq->spq", phi, coef[:, p * (j + 1):p * (j + 2)]) for j in range(d)], axis=2)
        conds[k] = float(cond.max())
        resid = target - np.einsum("spc,scq->spq", design, coef)
        var = np.sum((target - target.mean(axis=1, keepdims=True)) ** 2)
        r2[k] = 1.0 - float(np.sum(resid ** 2) / var) if var > 0 else 1.0

        base = base - np.einsum("spjn,sj->spn", z0k, noise.dW0[k])
        yk = base
        if driver.f is not None:
            zbar, z0bar = zk.mean(axis=1, keepdims=True), z0k.mean(axis=1, keepdims=True)
            sweeps = inner_sweeps if inner_tol is None else 200
            y_guess = base
            for _ in range(max(1, sweeps) if driver.depends_on_theta else 1):
                mom = JointMoments(k, t, mk, y_guess.mean(axis=1, keepdims=True), zbar, z0bar)
                fval = np.broadcast_to(driver.f(t, xk, y_guess, zk, z0k, mom, ik), (M, N, n))
                y_new = base + fval * dt
                change = float(np.max(np.abs(y_new - y_guess))) if y_new.size else 0.0
                y_guess = y_new
                if inner_tol is not None and change < inner_tol:
                    break
            yk = y_guess
        if not (np.all(np.isfinite(yk)) and np.all(np.isfinite(zk))):
            raise NonFinite(f"non-finite backward value at node {k}")
        Y[k], Z[k], Z0[k] = yk, zk, z0k
        fy[k] = fit(yk, k, fy[k + 1])
        fz[k] = fit(zk.reshape(M, N, d * n), k, fz[k + 1] if k + 1 < grid.n_steps else None)
        fz0[k] = fit(z0k.reshape(M, N, d0 * n), k, fz0[k + 1] if k + 1 < grid.n_steps else None)

    Z[-1], Z0[-1] = Z[-2], Z0[-2]
    fz[-1], fz0[-1] = fz[-2], fz0[-2]
    diag = RegressionDiagnostics(conds, r2, conds > cond_threshold)
    return BackwardSolution(grid, Y, Z, Z0, Kload, term, diag, MarkovFits(basis_degree, fy, fz, fz0))


@dataclass(frozen=True)
class TransversalityTable:
    horizons: np.ndarray
    probes: np.ndarray
    values: np.ndarray
    decreasing: np.ndarray
    max_relative_spread: np.ndarray

    def horizon_insensitive(self, rel: float = 0.05) -> bool:
        return bool(np.all(self.max_relative_spread <= rel))


def transversality_check(solutions: Sequence[BackwardSolution], kappa: float, probes) -> TransversalityTable:
    """``e^{kappa T'} E|Y_T'|^2`` at probe times for solutions on growing horizons."""
    probes = np.asarray(probes, dtype=float)
    horizons = np.array([s.grid.horizon for s in solutions])
    vals = np.empty((len(solutions), probes.size))
    for r, sol in enumerate(solutions):
        idx = np.clip(np.round((probes - sol.grid.t0) / sol.grid.dt).astype(int), 0, sol.grid.n_steps)
        sq = np.einsum("kspn,kspn->k", sol.Y[idx], sol.Y[idx]) / (sol.Y.shape[1] * sol.Y.shape[2])
        vals[r] = np.exp(kappa * probes) * sq
    decreasing = np.all(np.diff(vals, axis=1) <= 1e-15 + 1e-12 * np.abs(vals[:, :-1]), axis=1)
    ref = np.maximum(np.abs(vals[-1]), 1e-300)
    spread = np.where(np.abs(vals[-1]) > 0, (vals.max(axis=0) - vals.min(axis=0)) / ref, 0.0)
    return TransversalityTable(horizons, probes, vals, decreasing, spread)


def write_backward_csv(sol: BackwardSolution, target) -> None:
    Y, Z = sol.Y, sol.Z
    n = Y.shape[3]
    with Path(target).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "scenario", "particle"] + [f"y{i}" for i in range(n)] + ["z_norm", "z0_norm"])
        for k, t in enumerate(sol.grid.nodes):
            zn = np.sqrt(np.einsum("spjn,spjn->sp", Z[k], Z[k]))
            z0n = np.sqrt(np.einsum("spjn,spjn->sp", sol.Z0[k], sol.Z0[k]))
            for s in range(Y.shape[1]):
                for p in range(Y.shape[2]):
                    w.writerow([repr(float(t)), s, p] + [repr(float(v)) for v in Y[k, s, p]]
                               + [repr(float(zn[s, p])), repr(float(z0n[s, p]))])
