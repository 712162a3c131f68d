"""Fully coupled conditional McKean-Vlasov FBSDEs.

The solver alternates a forward sweep (adjoint frozen) with a backward sweep
(state frozen) on common random numbers, damping the adjoint between sweeps.
:func:`solve_fbsde_continuation` wraps it in the homotopy

    b_l = l*b + (1-l)*kappa_x/2*x + b0,      sigma_l = l*sigma + sigma0,
    sigma_tilde_l = l*sigma_tilde + sigma_tilde0,
    f_l = l*f + (1-l)*kappa_y*y + f0,        X_t = x0 + l*Phi(Y_t, E0 Y_t),

whose ``l = 0`` member is decoupled and whose ``l = 1`` member is the target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backward import BackwardSolution, DriverCallback, JointMoments, solve_mkv_bsde
from .forward import (CoefficientCallbacks, EnsembleBatch, NoiseBundle, draw_noise,
                      simulate_conditional_mkv_sde)
from .grid import TimeGrid, trapezoid
from .regime import GeneratorMatrix, validate_generator

ThetaFn = Callable[[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray, JointMoments, np.ndarray],
                   np.ndarray]


class NoConvergence(RuntimeError):
    def __init__(self, message: str, solution: "FBSDESolution | None" = None):
        super().__init__(message)
        self.solution = solution


class StepFloorReached(NoConvergence):
    pass


@dataclass(frozen=True)
class Numerics:
    dt: float = 0.02
    particles: int = 256
    scenarios: int = 8
    seed: int = 0
    tol: float = 1e-4
    max_iters: int = 60
    damping: float = 0.5
    lambda_steps: tuple = (0.0, 1.0)
    basis_degree: int = 1
    threads: int = 1
    inner_sweeps: int = 1


@dataclass(frozen=True)
class FBSDEProblem:
    """Coefficients are called as ``h(t, x, y, z, z0, moments, regime)``.

    Shapes: ``x`` (M, N, n), ``y`` (M, N, n), ``z`` (M, N, d, n), ``z0``
    (M, N, d0, n), ``regime`` (M,).  ``b`` and ``f`` return (M, N, n),
    ``sigma`` (M, N, d, n) and ``sigma_tilde`` (M, N, d0, n).  The additive
    parts ``b0``, ``sigma0``, ``sigma_tilde0``, ``f0`` take ``(t, regime)``
    and are never scaled by the homotopy.  ``phi`` maps ``(y, E0 y, regime)``
    to an addition to the initial state.
    """

    n: int
    d: int
    d0: int
    grid: TimeGrid
    x0: object
    b: ThetaFn | None = None
    sigma: ThetaFn | None = None
    sigma_tilde: ThetaFn | None = None
    f: ThetaFn | None = None
    b0: Callable | None = None
    sigma0: Callable | None = None
    sigma_tilde0: Callable | None = None
    f0: Callable | None = None
    phi: Callable | None = None
    generator: GeneratorMatrix = field(default_factory=lambda: validate_generator([[0.0]]))
    initial_regime: int = 0
    kappa: float = 0.0
    kappa_star: float = 0.0
    kappa_x: float = 0.0
    kappa_y: float = 0.0
    regime_free: bool = False
    numerics: Numerics = field(default_factory=Numerics)

    def noise(self) -> NoiseBundle:
        nm = self.numerics
        return draw_noise(self.grid, nm.scenarios, nm.particles, self.d, self.d0, nm.seed,
                          self.generator, self.initial_regime, nm.threads)


@dataclass(frozen=True)
class IterationRecord:
    sweep: int
    error: float
    ratio: float
    lam: float


@dataclass(frozen=True)
class FBSDESolution:
    forward: EnsembleBatch
    backward: BackwardSolution
    history: list
    lambda_schedule: list
    iterations_per_step: list
    converged: bool
    final_error: float
    tol: float

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.history])

    @property
    def ratios(self) -> np.ndarray:
        r = np.array([rec.ratio for rec in self.history])
        return r[np.isfinite(r)]

    @property
    def smallest_step(self) -> float:
        """Smallest homotopy increment that succeeded (an empirical step-size proxy)."""
        lam = np.array(self.lambda_schedule, dtype=float)
        return float(np.min(np.diff(lam))) if lam.size > 1 else float("nan")


@dataclass(frozen=True)
class _Theta:
    Y: np.ndarray
    Z: np.ndarray
    Z0: np.ndarray

    @staticmethod
    def zeros(shape_x, d, d0, n):
        K, M, N, _ = shape_x
        return _Theta(np.zeros((K, M, N, n)), np.zeros((K, M, N, d, n)), np.zeros((K, M, N, d0, n)))

    @staticmethod
    def of(sol: BackwardSolution):
        return _Theta(sol.Y, sol.Z, sol.Z0)

    def blend(self, other: "_Theta", w: float) -> "_Theta":
        if w == 1.0:
            return other
        return _Theta(w * other.Y + (1 - w) * self.Y, w * other.Z + (1 - w) * self.Z,
                      w * other.Z0 + (1 - w) * self.Z0)


def weighted_sq(grid: TimeGrid, kappa: float, *diffs: np.ndarray) -> float:
    """``int e^{kappa s} E|.|^2 ds`` summed over the given node-major arrays."""
    total = np.zeros(grid.n_nodes)
    for a in diffs:
        total += (a * a).reshape(a.shape[0], -1).sum(axis=1) / (a.shape[1] * a.shape[2])
    return float(trapezoid(np.exp(kappa * grid.nodes) * total, grid.dt))


def _forward_callbacks(p: FBSDEProblem, theta: _Theta, lam: float) -> CoefficientCallbacks:
    ybar = theta.Y.mean(axis=2, keepdims=True)
    zbar = theta.Z.mean(axis=2, keepdims=True)
    z0bar = theta.Z0.mean(axis=2, keepdims=True)
    half_kx = 0.5 * p.kappa_x

    def args(t, x, mom, reg):
        k = mom.k
        return (t, x, theta.Y[k], theta.Z[k], theta.Z0[k],
                JointMoments(k, t, mom.mean, ybar[k], zbar[k], z0bar[k]), reg)

    def b(t, x, mom, reg):
        out = (1.0 - lam) * half_kx * x
        if p.b is not None and lam != 0.0:
            out = out + lam * p.b(*args(t, x, mom, reg))
        if p.b0 is not None:
            out = out + p.b0(t, reg)
        return out

    def scaled(main, extra):
        if main is None and extra is None:
            return None

        def h(t, x, mom, reg):
            out = 0.0
            if main is not None and lam != 0.0:
                out = out + lam * main(*args(t, x, mom, reg))
            if extra is not None:
                out = out + extra(t, reg)
            return out
        return h

    return CoefficientCallbacks(b, scaled(p.sigma, p.sigma0), scaled(p.sigma_tilde, p.sigma_tilde0))


def _driver(p: FBSDEProblem, lam: float) -> DriverCallback:
    ky = p.kappa_y

    def f(t, x, y, z, z0, mom, reg):
        out = (1.0 - lam) * ky * y
        if p.f is not None and lam != 0.0:
            out = out + lam * p.f(t, x, y, z, z0, mom, reg)
        if p.f0 is not None:
            out = out + p.f0(t, reg)
        return out

    return DriverCallback(f)


def _initial(p: FBSDEProblem, theta: _Theta, lam: float, noise: NoiseBundle):
    x0 = p.x0
    if p.phi is None or lam == 0.0:
        return x0
    M, N = noise.scenarios, noise.particles
    base = np.broadcast_to(np.asarray(x0, float), (M, N, p.n)) if not callable(x0) else None
    if base is None:
        raise ValueError("a sampled initial law cannot be combined with an initial-condition map")
    y = theta.Y[0]
    return base + lam * p.phi(y, y.mean(axis=1, keepdims=True), noise.states[0])


def _sweep(p, noise, theta, lam):
    cb = _forward_callbacks(p, theta, lam)
    fwd = simulate_conditional_mkv_sde(cb, _initial(p, theta, lam, noise), noise, keep_sigma_tilde=True)
    nm = p.numerics
    bwd = solve_mkv_bsde(_driver(p, lam), fwd, None, nm.basis_degree, nm.inner_sweeps,
                         regime_free=p.regime_free, n=p.n)
    return fwd, bwd


def _picard(p: FBSDEProblem, noise: NoiseBundle, lam: float, start: tuple | None, tol, max_iters,
            damping, history: list, sweep0: int = 0):
    grid = p.grid
    if start is None:
        X_prev = None
        theta_used = _Theta.zeros((grid.n_nodes, noise.scenarios, noise.particles, p.n), p.d, p.d0, p.n)
        theta_hat_prev = theta_used
    else:
        X_prev, theta_used = start
        theta_hat_prev = theta_used
    first = None
    fwd = bwd = None
    for it in range(1, max_iters + 1):
        fwd, bwd = _sweep(p, noise, theta_used, lam)
        hat = _Theta.of(bwd)
        dX = fwd.X if X_prev is None else fwd.X - X_prev
        err = np.sqrt(weighted_sq(grid, p.kappa, dX, hat.Y - theta_hat_prev.Y, hat.Z - theta_hat_prev.Z,
                                  hat.Z0 - theta_hat_prev.Z0))
        prev_err = history[-1].error if history and history[-1].lam == lam and it > 1 else np.nan
        history.append(IterationRecord(sweep0 + it, err, err / prev_err if prev_err > 0 else np.nan, lam))
        if first is None:
            first = max(err, 1e-300)
        if not np.isfinite(err) or err > 1e6 * first:
            return fwd, bwd, it, False
        if err < tol:
            return fwd, bwd, it, True
        X_prev, theta_hat_prev = fwd.X, hat
        theta_used = theta_used.blend(hat, damping)
    return fwd, bwd, max_iters, False


def solve_fbsde_picard(p: FBSDEProblem, damping: float | None = None, tol: float | None = None,
                       max_iters: int | None = None, noise: NoiseBundle | None = None,
                       raise_on_failure: bool = True, start: FBSDESolution | None = None) -> FBSDESolution:
    """Damped decoupling iteration on the full problem (homotopy parameter 1).

    ``start`` warm-starts the iteration from an earlier solution computed on
    the same noise.
    """
    nm = p.numerics
    damping = nm.damping if damping is None else damping
    tol = nm.tol if tol is None else tol
    max_iters = nm.max_iters if max_iters is None else max_iters
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    noise = noise or p.noise()
    history: list[IterationRecord] = []
    init = None if start is None else (start.forward.X, _Theta.of(start.backward))
    fwd, bwd, its, ok = _picard(p, noise, 1.0, init, tol, max_iters, damping, history)
    sol = FBSDESolution(fwd, bwd, history, [1.0], [its], ok, history[-1].error, tol)
    if not ok and raise_on_failure:
        raise NoConvergence(f"Picard stopped after {its} sweeps at error {history[-1].error:.3g}", sol)
    return sol


def solve_fbsde_continuation(p: FBSDEProblem, lambda_steps: Sequence[float] | None = None,
                             damping: float | None = None, tol: float | None = None,
                             max_iters: int | None = None, noise: NoiseBundle | None = None,
                             floor_divisor: int = 64) -> FBSDESolution:
    """Homotopy from the decoupled member to the target, warm-starting each step.

    A failed step is retried with half the increment, down to
    ``initial increment / floor_divisor``.
    """
    nm = p.numerics
    steps = list(nm.lambda_steps if lambda_steps is None else lambda_steps)
    if len(steps) < 2 or steps[0] != 0.0 or steps[-1] != 1.0 or np.any(np.diff(steps) <= 0):
        raise ValueError("schedule must increase from 0 to 1")
    damping = nm.damping if damping is None else damping
    tol = nm.tol if tol is None else tol
    max_iters = nm.max_iters if max_iters is None else max_iters
    noise = noise or p.noise()
    history: list[IterationRecord] = []
    fwd, bwd, its, ok = _picard(p, noise, 0.0, None, tol, max_iters, damping, history)
    if not ok:
        sol = FBSDESolution(fwd, bwd, history, [0.0], [its], False, history[-1].error, tol)
        raise StepFloorReached("the decoupled base member did not converge", sol)
    done, counts = [0.0], [its]
    floor = min(np.diff(steps)) / floor_divisor
    lam, targets = 0.0, steps[1:]
    state = (fwd.X, _Theta.of(bwd))
    best = (fwd, bwd)
    while targets:
        nxt = targets[0]
        trial: list[IterationRecord] = []
        f2, b2, its, ok = _picard(p, noise, nxt, state, tol, max_iters, damping, trial,
                                  sweep0=len(history))
        history.extend(trial)
        if ok:
            lam = nxt
            done.append(lam)
            counts.append(its)
            state = (f2.X, _Theta.of(b2))
            best = (f2, b2)
            targets.pop(0)
            continue
        step = (nxt - lam) / 2.0
        if step < floor:
            sol = FBSDESolution(best[0], best[1], history, done, counts, False, history[-1].error, tol)
            raise StepFloorReached(f"homotopy stuck at lambda={lam:.4g}", sol)
        targets.insert(0, lam + step)
    return FBSDESolution(best[0], best[1], history, done, counts, True, history[-1].error, tol)


def write_history_csv(sol: FBSDESolution, target) -> None:
    with Path(target).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "weighted_error", "ratio", "lambda"])
        for r in sol.history:
            w.writerow([r.sweep, repr(float(r.error)), "" if not np.isfinite(r.ratio) else repr(float(r.ratio)),
                        repr(float(r.lam))])


# --------------------------------------------------------------------------
# domination and monotonicity

@dataclass(frozen=True)
class TestFunctionals:
    """``beta1`` and the nonnegative functional ``varphi`` of the differences.

    ``varphi(t, dy, dz, dz0, regime)`` receives differences of shape
    (B, N, .) and returns per-particle values (B, N).
    """

    beta1: float
    varphi: Callable


@dataclass(frozen=True)
class MonotonicityReport:
    monotonicity_margin: np.ndarray
    domination_margin: np.ndarray
    worst_monotonicity: float
    worst_domination: float
    holds: bool
    violations: int


def _eval_all(p, t, x, y, z, z0, reg):
    mom = JointMoments(-1, t, x.mean(axis=1, keepdims=True), y.mean(axis=1, keepdims=True),
                       z.mean(axis=1, keepdims=True), z0.mean(axis=1, keepdims=True))
    shape = x.shape
    M, N, n = shape
    zero = lambda s: np.zeros(s)

    def call(h, extra, out_shape):
        out = zero(out_shape)
        if h is not None:
            out = out + np.broadcast_to(h(t, x, y, z, z0, mom, reg), out_shape)
        if extra is not None:
            out = out + np.broadcast_to(extra(t, reg), out_shape)
        return out

    return (call(p.b, p.b0, shape), call(p.sigma, p.sigma0, (M, N, p.d, n)),
            call(p.sigma_tilde, p.sigma_tilde0, (M, N, p.d0, n)), call(p.f, p.f0, shape))


def verify_domination_monotonicity(p: FBSDEProblem, functionals: TestFunctionals, samples: int = 1000,
                                   block: int = 16, seed: int = 0, shift: float | None = None,
                                   scale: float = 1.0, tol: float = 1e-8,
                                   monotonicity_beta: float | None = None) -> MonotonicityReport:
    """Sample pairs of particle blocks and test both structural inequalities.

    Monotonicity, per block:
        E[<-df, dX> + <db, dY> + <dsigma, dZ> + <dsigma_tilde, dZ0>] + shift*E<dX, dY>
            <= -beta1 * E[varphi]
    with block means standing for the conditional expectations.  ``shift``
    defaults to the problem's discount ``kappa``; ``monotonicity_beta``
    replaces ``beta1`` in the monotonicity inequality only.  Domination holds the
    state fixed and checks ``E|dh|^2 <= E[varphi] / beta1`` for h = b,
    sigma, sigma_tilde.  Margins are right side minus left side.
    """
    rng = np.random.default_rng(seed)
    shift = p.kappa if shift is None else shift
    n, d, d0 = p.n, p.d, p.d0
    m0 = p.generator.m0
    beta = functionals.beta1
    mono_beta = beta if monotonicity_beta is None else monotonicity_beta
    mono = np.empty(samples)
    dom = np.empty(samples)
    for i in range(samples):
        t = float(rng.uniform(p.grid.t0, p.grid.horizon))
        reg = np.array([rng.integers(m0)])
        draws = [scale * rng.standard_normal(s) for s in
                 ((1, block, n), (1, block, n), (1, block, d, n), (1, block, d0, n))] * 2
        x1, y1, z1, w1, x2, y2, z2, w2 = draws
        # a shared random offset makes the block means differ as well
        x2 = x2 + scale * rng.standard_normal((1, 1, n))
        y2 = y2 + scale * rng.standard_normal((1, 1, n))
        b1, s1, g1, f1 = _eval_all(p, t, x1, y1, z1, w1, reg)
        b2, s2, g2, f2 = _eval_all(p, t, x2, y2, z2, w2, reg)
        dx, dy, dz, dw = x1 - x2, y1 - y2, z1 - z2, w1 - w2
        lhs = (np.sum(-(f1 - f2) * dx) + np.sum((b1 - b2) * dy) + np.sum((s1 - s2) * dz)
               + np.sum((g1 - g2) * dw) + shift * np.sum(dx * dy)) / block
        phi = float(np.mean(functionals.varphi(t, dy, dz, dw, reg)))
        mono[i] = -mono_beta * phi - lhs
        # domination: same state, different adjoint
        b3, s3, g3, _ = _eval_all(p, t, x1, y2, z2, w2, reg)
        worst = max(np.sum((b1 - b3) ** 2), np.sum((s1 - s3) ** 2), np.sum((g1 - g3) ** 2)) / block
        dom[i] = (phi / beta if beta > 0 else np.inf) - worst
    holds = bool(np.all(mono >= -tol) and np.all(dom >= -tol))
    return MonotonicityReport(mono, dom, float(mono.min()), float(dom.min()), holds,
                              int(np.sum(mono < -tol) + np.sum(dom < -tol)))
