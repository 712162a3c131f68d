"""Mean-field linear-quadratic control with regime switching and common noise.

The optimal open-loop control comes from the Hamiltonian system of the
problem written in the cross-term-free variables (see
:func:`~mfswitch.coeffs.eliminate_cross_terms`): with

    rho1 = B^T y + D^T z + N^T z0,
    rho2 = (B+Bbar)^T y + (D+Dbar)^T z + (N+Nbar)^T z0,

the transformed optimal control is

    uu = -R^-1 (rho1 - E0 rho1) - (R+Rbar)^-1 (E0 rho2 + r + rbar),

and the original control is recovered by undoing the change of variables.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .backward import BackwardSolution, DriverCallback, solve_mkv_bsde
from .coeffs import (KappaBounds, LQCoefficients, TransformedCoefficients, apply, check_positive_definiteness,
                     compute_kappa_bounds, eliminate_cross_terms, gather, transform_control,
                     untransform_control)
from .coupled import (FBSDEProblem, FBSDESolution, Numerics, TestFunctionals, solve_fbsde_continuation,
                      solve_fbsde_picard, weighted_sq)
from .forward import CoefficientCallbacks, EnsembleBatch, NoiseBundle, simulate_conditional_mkv_sde
from .grid import TimeGrid, trapezoid
from .regime import GeneratorMatrix, validate_generator


class PDViolation(ValueError):
    pass


class GridMismatch(ValueError):
    pass


class NoPSDRoot(ArithmeticError):
    pass


def _T(a):
    return np.swapaxes(a, -1, -2)


def _flat(z):
    """(M, N, k, n) stacked loading -> (M, N, k*n)."""
    return z.reshape(z.shape[:-2] + (-1,))


def _unflat(v, k):
    return v.reshape(v.shape[:-1] + (k, -1))


# --------------------------------------------------------------------------
# controls

@dataclass(frozen=True)
class ControlProcess:
    """Control values ``u`` of shape (n_nodes, M, N, m)."""

    u: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.u.mean(axis=2, keepdims=True)

    def __add__(self, other: "ControlProcess") -> "ControlProcess":
        return ControlProcess(self.u + other.u)

    def scaled(self, eps: float) -> "ControlProcess":
        return ControlProcess(eps * self.u)


def _rho(c: LQCoefficients, t, reg, y, z, z0, bar: bool):
    B, D, N = gather(c.B, c, t, reg), gather(c.D, c, t, reg), gather(c.N, c, t, reg)
    if bar:
        B = B + gather(c.Bbar, c, t, reg)
        D = D + gather(c.Dbar, c, t, reg)
        N = N + gather(c.Nbar, c, t, reg)
    out = apply(_T(B), y)
    if D.size:
        out = out + apply(_T(D), _flat(z))
    if N.size:
        out = out + apply(_T(N), _flat(z0))
    return out


def transformed_control_from_adjoint(c: LQCoefficients, tc: TransformedCoefficients, t, reg, y, z, z0):
    """``uu`` for adjoint values of shape (M, N, .) in one node."""
    r1 = _rho(c, t, reg, y, z, z0, bar=False)
    r2bar = _rho(c, t, reg, y.mean(axis=1, keepdims=True), z.mean(axis=1, keepdims=True),
                 z0.mean(axis=1, keepdims=True), bar=True)
    Ri, RRi = gather(tc.Rinv, c, t, reg), gather(tc.RRinv, c, t, reg)
    rr = (gather(c.r, c, t, reg) + gather(c.rbar, c, t, reg))[:, None, :]
    return -apply(Ri, r1 - r1.mean(axis=1, keepdims=True)) - apply(RRi, r2bar + rr)


def control_from_adjoint(c, tc, grid: TimeGrid, states, X, Y, Z, Z0) -> tuple[ControlProcess, ControlProcess]:
    """Original and transformed controls along whole trajectories."""
    uu = np.empty(X.shape[:3] + (c.m,))
    u = np.empty_like(uu)
    for k, t in enumerate(grid.nodes):
        reg = states[k]
        uu[k] = transformed_control_from_adjoint(c, tc, t, reg, Y[k], Z[k], Z0[k])
        u[k] = untransform_control(c, X[k], X[k].mean(axis=1, keepdims=True), uu[k], t, reg)
    return ControlProcess(u), ControlProcess(uu)


# --------------------------------------------------------------------------
# Hamiltonian system

def assemble_control_hamiltonian(tc: TransformedCoefficients, c: LQCoefficients, kappa: float, x0=0.0,
                                 grid: TimeGrid | None = None, generator: GeneratorMatrix | None = None,
                                 initial_regime: int = 0, numerics: Numerics | None = None,
                                 bounds: KappaBounds | None = None) -> FBSDEProblem:
    """FBSDE whose solution gives the optimal control.

    State coefficients are the transformed blocks with the optimal control
    substituted; the adjoint driver is

        f = Q x + Qbar E0x + (kappa I + A)^T y + C^T z + M^T z0
            + Abar^T E0y + Cbar^T E0z + Mbar^T E0z0 + q + qbar

    (script blocks).  Constant parts go to the unscaled additive terms.
    """
    grid = grid or TimeGrid(0.0, 1.0, 0.02)
    n, m, d, d0 = c.n, c.m, c.d, c.d0
    g = lambda blk, t, reg: gather(blk, c, t, reg)
    bounds = bounds or compute_kappa_bounds(tc, kappa, c.kappa_star)
    zeros_y = lambda x: np.zeros(x.shape[:2] + (n,))

    def control_parts(t, reg, y, z, z0, mom):
        """Linear part of uu (no r terms) and its scenario mean."""
        r1 = _rho(c, t, reg, y, z, z0, bar=False)
        r1m = _rho(c, t, reg, mom.y, mom.z, mom.z0, bar=False)
        r2m = _rho(c, t, reg, mom.y, mom.z, mom.z0, bar=True)
        mean_part = -apply(g(tc.RRinv, t, reg), r2m)
        return -apply(g(tc.Rinv, t, reg), r1 - r1m) + mean_part, mean_part

    def const_control(t, reg):
        rr = (g(c.r, t, reg) + g(c.rbar, t, reg))[:, None, :]
        return -apply(g(tc.RRinv, t, reg), rr)

    def state_part(lin, bar, ctrl, ctrl_bar, t, x, mom, reg, uu, uum):
        out = apply(g(lin, t, reg), x) + apply(g(bar, t, reg), mom.x)
        out = out + apply(g(ctrl, t, reg), uu) + apply(g(ctrl_bar, t, reg), uum)
        return out

    def b(t, x, y, z, z0, mom, reg):
        uu, uum = control_parts(t, reg, y, z, z0, mom)
        return state_part(tc.A, tc.Abar, c.B, c.Bbar, t, x, mom, reg, uu, uum)

    def sigma(t, x, y, z, z0, mom, reg):
        uu, uum = control_parts(t, reg, y, z, z0, mom)
        return _unflat(state_part(tc.C, tc.Cbar, c.D, c.Dbar, t, x, mom, reg, uu, uum), d)

    def sigma_tilde(t, x, y, z, z0, mom, reg):
        uu, uum = control_parts(t, reg, y, z, z0, mom)
        return _unflat(state_part(tc.M, tc.Mbar, c.N, c.Nbar, t, x, mom, reg, uu, uum), d0)

    def f(t, x, y, z, z0, mom, reg):
        A = g(tc.A, t, reg)
        out = apply(g(tc.Q, t, reg), x) + apply(g(tc.Qbar, t, reg), mom.x)
        out = out + kappa * y + apply(_T(A), y) + apply(_T(g(tc.Abar, t, reg)), mom.y)
        if d:
            out = out + apply(_T(g(tc.C, t, reg)), _flat(z)) + apply(_T(g(tc.Cbar, t, reg)), _flat(mom.z))
        if d0:
            out = out + apply(_T(g(tc.M, t, reg)), _flat(z0)) + apply(_T(g(tc.Mbar, t, reg)), _flat(mom.z0))
        return out

    def additive(vec, ctrl, ctrl_bar, k):
        def h(t, reg):
            uc = const_control(t, reg)
            out = g(vec, t, reg)[:, None, :] + apply(g(ctrl, t, reg) + g(ctrl_bar, t, reg), uc)
            return out if k is None else _unflat(out, k)
        return h

    def f0(t, reg):
        return (g(tc.q, t, reg) + g(tc.qbar, t, reg))[:, None, :]

    return FBSDEProblem(
        n=n, d=d, d0=d0, grid=grid, x0=x0, b=b, sigma=sigma, sigma_tilde=sigma_tilde, f=f,
        b0=additive(c.b, c.B, c.Bbar, None), sigma0=additive(c.sigma, c.D, c.Dbar, d),
        sigma_tilde0=additive(c.gamma, c.N, c.Nbar, d0), f0=f0,
        generator=generator or validate_generator(np.zeros((c.m0, c.m0))),
        initial_regime=initial_regime, kappa=float(kappa), kappa_star=c.kappa_star,
        kappa_x=bounds.kappa_x, kappa_y=bounds.kappa_y, regime_free=c.is_regime_free(),
        numerics=numerics or Numerics())


def control_functionals(c: LQCoefficients) -> TestFunctionals:
    """``beta1 = min(1/L1, L2)`` and ``varphi = |d rho1 - E0 d rho1|^2 + |E0 d rho2|^2``."""
    Ri = np.linalg.inv(c.R)
    RRi = np.linalg.inv(c.R + c.Rbar)
    nrm = lambda a: np.linalg.norm(a, ord=2, axis=(-2, -1)) ** 2 if a.size else np.zeros(a.shape[:-2])
    L1 = 2.0 * max(float(np.max(v)) for v in (
        nrm(c.B @ Ri), nrm(c.D @ Ri), nrm(c.N @ Ri), nrm((c.B + c.Bbar) @ RRi),
        nrm((c.D + c.Dbar) @ RRi), nrm((c.N + c.Nbar) @ RRi)))
    L2 = min(float(np.min(np.linalg.eigvalsh(Ri))), float(np.min(np.linalg.eigvalsh(RRi))))
    beta1 = min(1.0 / L1, L2) if L1 > 0 else L2

    def varphi(t, dy, dz, dz0, reg):
        r1 = _rho(c, t, reg, dy, dz, dz0, bar=False)
        r2 = _rho(c, t, reg, dy.mean(axis=1, keepdims=True), dz.mean(axis=1, keepdims=True),
                  dz0.mean(axis=1, keepdims=True), bar=True)
        dev = r1 - r1.mean(axis=1, keepdims=True)
        return np.sum(dev ** 2, axis=-1) + np.sum(r2 ** 2, axis=-1)

    return TestFunctionals(beta1, varphi)


# --------------------------------------------------------------------------
# state simulation under a given control

class _ControlCache:
    def __init__(self):
        self.k = None
        self.value = None


def _state_callbacks(c: LQCoefficients, control, record: np.ndarray | None = None) -> CoefficientCallbacks:
    """Original-coordinate state equation driven by ``control(k, t, x, mom, reg)``."""
    cache = _ControlCache()
    g = lambda blk, t, reg: gather(blk, c, t, reg)

    def u_at(t, x, mom, reg):
        if cache.k != mom.k:
            cache.k, cache.value = mom.k, control(mom.k, t, x, mom, reg)
            if record is not None:
                record[mom.k] = cache.value
        return cache.value

    def part(vec, lin, bar, ctrl, ctrl_bar, t, x, mom, reg):
        u = u_at(t, x, mom, reg)
        out = g(vec, t, reg)[:, None, :] + apply(g(lin, t, reg), x) + apply(g(bar, t, reg), mom.mean)
        return out + apply(g(ctrl, t, reg), u) + apply(g(ctrl_bar, t, reg), u.mean(axis=1, keepdims=True))

    b = lambda t, x, mom, reg: part(c.b, c.A, c.Abar, c.B, c.Bbar, t, x, mom, reg)
    s = lambda t, x, mom, reg: _unflat(part(c.sigma, c.C, c.Cbar, c.D, c.Dbar, t, x, mom, reg), c.d)
    st = lambda t, x, mom, reg: _unflat(part(c.gamma, c.M, c.Mbar, c.N, c.Nbar, t, x, mom, reg), c.d0)
    return CoefficientCallbacks(b, s, st)


def simulate_state(c: LQCoefficients, u: ControlProcess, x0, noise: NoiseBundle) -> EnsembleBatch:
    """State driven by an open-loop control array on the given noise."""
    if u.u.shape[0] != noise.grid.n_nodes:
        raise GridMismatch("control and noise live on different grids")
    cb = _state_callbacks(c, lambda k, t, x, mom, reg: u.u[k])
    return simulate_conditional_mkv_sde(cb, x0, noise, keep_sigma_tilde=True)


FeedbackLaw = Callable[[int, float, np.ndarray, object, np.ndarray], np.ndarray]


def simulate_closed_loop(c: LQCoefficients, law: FeedbackLaw, x0, noise: NoiseBundle):
    """State under a feedback law ``law(k, t, x, moments, regime) -> (M, N, m)``."""
    record = np.zeros((noise.grid.n_nodes, noise.scenarios, noise.particles, c.m))
    batch = simulate_conditional_mkv_sde(_state_callbacks(c, law, record), x0, noise, keep_sigma_tilde=True)
    last = batch.X[-1]
    from .forward import summarize
    record[-1] = law(noise.grid.n_steps, float(noise.grid.nodes[-1]), last,
                     summarize(noise.grid.n_steps, float(noise.grid.nodes[-1]), last), noise.states[-1])
    return batch, ControlProcess(record)


def feedback_from_solution(c: LQCoefficients, sol: BackwardSolution) -> FeedbackLaw:
    """Feedback law built from the stored Markov fits of the adjoint."""
    tc = eliminate_cross_terms(c)

    def law(k, t, x, mom, reg):
        y, z, z0 = sol.markov.theta(k, x, mom.mean, reg)
        uu = transformed_control_from_adjoint(c, tc, t, reg, y, z, z0)
        return untransform_control(c, x, mom.mean, uu, t, reg)

    return law


# --------------------------------------------------------------------------
# cost

@dataclass(frozen=True)
class CostBreakdown:
    total: float
    state_quad: float
    control_quad: float
    cross: float
    mean_field: float
    linear: float
    se: float
    tail_bound: float
    per_scenario: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "per_scenario"}


def _quad(mat, a, b):
    """<a, mat b> per particle: mat (K, M, i, j), a (K, M, N, i), b (K, M, N, j)."""
    return np.einsum("kspi,ksij,kspj->ksp", a, mat, b)


def cost_integrands(c: LQCoefficients, X: np.ndarray, u: np.ndarray, grid: TimeGrid, states: np.ndarray):
    """Per-node, per-particle integrands of the five cost components (without 1/2 or weights)."""
    t = grid.nodes
    G = lambda blk: gather(blk, c, t, states)
    mx = X.mean(axis=2, keepdims=True)
    mu = u.mean(axis=2, keepdims=True)
    mxb = np.broadcast_to(mx, X.shape)
    mub = np.broadcast_to(mu, u.shape)
    state = _quad(G(c.Q), X, X)
    control = _quad(G(c.R), u, u)
    cross = _quad(G(c.S), u, X)
    mean = _quad(G(c.Qbar), mxb, mxb) + 2 * _quad(G(c.Sbar), mub, mxb) + _quad(G(c.Rbar), mub, mub)
    lin = (np.einsum("ksi,kspi->ksp", G(c.q), X) + np.einsum("ksi,kspi->ksp", G(c.r), u)
           + np.einsum("ksi,kspi->ksp", G(c.qbar), mxb) + np.einsum("ksi,kspi->ksp", G(c.rbar), mub))
    return state, control, cross, mean, lin


def evaluate_cost(c: LQCoefficients, u: ControlProcess, ensembles: EnsembleBatch, kappa: float,
                  kappa_bar: float | None = None) -> CostBreakdown:
    """``J = 1/2 E int e^{kappa s} g ds`` by the trapezoid rule on the simulation grid."""
    X = ensembles.X
    if u.u.shape[:3] != X.shape[:3]:
        raise GridMismatch(f"control {u.u.shape[:3]} vs state {X.shape[:3]}")
    grid = ensembles.grid
    w = np.exp(kappa * grid.nodes)[:, None, None]
    parts = cost_integrands(c, X, u.u, grid, ensembles.noise.states)
    factors = (0.5, 0.5, 1.0, 0.5, 1.0)
    # integrate per particle, then average
    per_particle = [f * trapezoid(w * p, grid.dt) for f, p in zip(factors, parts)]
    comps = [float(pp.mean()) for pp in per_particle]
    totals = sum(per_particle)
    M = totals.shape[0]
    per_scenario = totals.mean(axis=1)
    if M >= 2:
        se = float(per_scenario.std(ddof=1) / np.sqrt(M))
    else:
        se = float(totals.std(ddof=1) / np.sqrt(totals.size)) if totals.size > 1 else 0.0
    total = float(totals.mean())
    tail = 0.0
    if kappa_bar is not None and kappa_bar > kappa:
        tail = abs(total) * float(np.exp((kappa - kappa_bar) * (grid.horizon - grid.t0)))
    return CostBreakdown(total, *comps, se=se, tail_bound=tail, per_scenario=per_scenario)


# --------------------------------------------------------------------------
# adjoint and optimality condition

def adjoint_driver(c: LQCoefficients, tc: TransformedCoefficients, kappa: float) -> DriverCallback:
    p = assemble_control_hamiltonian(tc, c, kappa, grid=TimeGrid(0.0, 1.0, 1.0),
                                     bounds=KappaBounds(0, 0, 0, 0, 0, 0, 0, 0, False, kappa, 0))
    return DriverCallback(lambda t, x, y, z, z0, mom, reg: p.f(t, x, y, z, z0, mom, reg) + p.f0(t, reg))


def solve_adjoint(c: LQCoefficients, batch: EnsembleBatch, kappa: float, basis_degree: int = 1,
                  inner_sweeps: int = 1) -> BackwardSolution:
    """Adjoint of the cross-term-free problem along a simulated state.

    Its driver does not involve the control, so the same call serves any
    admissible control that generated ``batch``.
    """
    tc = eliminate_cross_terms(c)
    return solve_mkv_bsde(adjoint_driver(c, tc, kappa), batch, None, basis_degree, inner_sweeps,
                          regime_free=c.is_regime_free(), n=c.n)


@dataclass(frozen=True)
class ResidualReport:
    per_node: np.ndarray
    weighted_norm: float


def stationarity_residual(c: LQCoefficients, u: ControlProcess, adjoint: BackwardSolution,
                          batch: EnsembleBatch, kappa: float) -> ResidualReport:
    """``B^T Y + Bbar^T E0Y + D^T Z + ... + R uu + Rbar E0uu + r + rbar`` with ``uu`` the transformed control."""
    grid = batch.grid
    if adjoint.Y.shape[:3] != batch.X.shape[:3] or u.u.shape[:3] != batch.X.shape[:3]:
        raise GridMismatch("control, adjoint and state must share grid and particles")
    states = batch.noise.states
    res = np.empty(u.u.shape)
    for k, t in enumerate(grid.nodes):
        reg = states[k]
        X = batch.X[k]
        uu = transform_control(c, X, X.mean(axis=1, keepdims=True), u.u[k], t, reg)
        Y, Z, Z0 = adjoint.Y[k], adjoint.Z[k], adjoint.Z0[k]
        r1 = _rho(c, t, reg, Y, Z, Z0, bar=False)
        means = (Y.mean(axis=1, keepdims=True), Z.mean(axis=1, keepdims=True), Z0.mean(axis=1, keepdims=True))
        rbar_part = _rho(c, t, reg, *means, bar=True) - _rho(c, t, reg, *means, bar=False)
        res[k] = (r1 + rbar_part + apply(gather(c.R, c, t, reg), uu)
                  + apply(gather(c.Rbar, c, t, reg), uu.mean(axis=1, keepdims=True))
                  + (gather(c.r, c, t, reg) + gather(c.rbar, c, t, reg))[:, None, :])
    per_node = np.sqrt((res * res).reshape(res.shape[0], -1).sum(axis=1) / (res.shape[1] * res.shape[2]))
    norm = np.sqrt(weighted_sq(grid, kappa, res))
    return ResidualReport(per_node, norm)


# --------------------------------------------------------------------------
# scalar oracle

def riccati_scalar_oracle(a: float, b: float, c: float, d: float, m: float, n_coef: float, q: float,
                          r: float, kappa: float) -> tuple[float, float]:
    """Stationary ``p`` and feedback gain for the scalar problem without mean field or cross terms.

    With ``Y = pX`` and ``u = -gain X`` the adjoint equation reduces to

        (2a + kappa + c^2 + m^2) p - p^2 beta^2 / (r + p delta) + q = 0,
        beta = b + c d + m n_coef,   delta = d^2 + n_coef^2,

    and ``gain = p beta / (r + p delta)``.  The left side is concave in
    ``p >= 0``; the root is found by bisection.
    """
    if r <= 0 or q < 0:
        raise NoPSDRoot("need r > 0 and q >= 0")
    lin = 2 * a + kappa + c * c + m * m
    beta = b + c * d + m * n_coef
    delta = d * d + n_coef * n_coef

    def F(p):
        return lin * p - p * p * beta * beta / (r + p * delta) + q

    if q == 0 and lin <= 0:
        return 0.0, 0.0
    hi = 1.0
    for _ in range(200):
        if F(hi) < 0:
            break
        hi *= 2.0
    else:
        raise NoPSDRoot("no nonnegative root: the scalar problem is not stabilisable at this discount")
    lo = 0.0 if q > 0 else hi * 1e-12
    if q == 0:
        # skip the trivial root at zero: find where F turns positive first
        lo = 1e-300
        while F(lo) <= 0 and lo < hi:
            lo = lo * 1e10 if lo < 1e-10 else lo * 2
        if F(lo) <= 0:
            return 0.0, 0.0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if F(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    p = 0.5 * (lo + hi)
    return p, p * beta / (r + p * delta)


def gain_estimate(u: ControlProcess, X: np.ndarray, grid: TimeGrid, start: float = 0.1, stop: float = 0.5) -> float:
    """``-sum u X / sum X^2`` over nodes in the fraction window [start, stop] of the horizon."""
    H = grid.horizon - grid.t0
    sel = (grid.nodes >= grid.t0 + start * H - 1e-12) & (grid.nodes <= grid.t0 + stop * H + 1e-12)
    uu, xx = u.u[sel], X[sel]
    return float(-np.sum(uu * xx) / np.sum(xx * xx))


# --------------------------------------------------------------------------
# the full pipeline

@dataclass(frozen=True)
class ControlSolution:
    u: ControlProcess
    uu: ControlProcess
    forward: EnsembleBatch
    fbsde: FBSDESolution
    cost: CostBreakdown
    bounds: KappaBounds
    pd_report: object

    @property
    def X(self) -> np.ndarray:
        return self.forward.X


def solve_control_problem(c: LQCoefficients, x_t, initial_regime: int = 0, numerics: Numerics | None = None,
                          kappa: float = 0.0, T: float = 5.0, t0: float = 0.0,
                          generator: GeneratorMatrix | None = None, method: str = "picard",
                          noise: NoiseBundle | None = None) -> ControlSolution:
    """Solve the Hamiltonian system and return the optimal control, state and cost.

    ``method`` is ``"picard"`` or ``"continuation"`` (the latter uses
    ``numerics.lambda_steps``).
    """
    numerics = numerics or Numerics()
    report = check_positive_definiteness(c)
    if not report.passed:
        bad = report.failures[0]
        raise PDViolation(f"{bad.name} has smallest eigenvalue {bad.value:.3g} "
                          f"(regime {bad.regime}, piece {bad.piece})")
    tc = eliminate_cross_terms(c)
    bounds = compute_kappa_bounds(tc, kappa, c.kappa_star)
    if not bounds.window_ok:
        warnings.warn("discount outside the admissibility window; solving anyway", RuntimeWarning, stacklevel=2)
    grid = TimeGrid(t0, T, numerics.dt)
    gen = generator or validate_generator(np.zeros((c.m0, c.m0)))
    p = assemble_control_hamiltonian(tc, c, kappa, x_t, grid, gen, initial_regime, numerics, bounds)
    noise = noise or p.noise()
    if method == "picard":
        sol = solve_fbsde_picard(p, noise=noise)
    elif method == "continuation":
        sol = solve_fbsde_continuation(p, noise=noise)
    else:
        raise ValueError(f"unknown method {method!r}")
    u, uu = control_from_adjoint(c, tc, grid, noise.states, sol.forward.X, sol.backward.Y, sol.backward.Z,
                                 sol.backward.Z0)
    state = simulate_state(c, u, x_t, noise)
    cost = evaluate_cost(c, u, state, kappa, bounds.kappa_bar)
    return ControlSolution(u, uu, state, sol, cost, bounds, report)


def random_direction(shape, grid: TimeGrid, X: np.ndarray, rng: np.random.Generator, scale: float = 1.0):
    """Adapted perturbation: smooth random time profile plus a random multiple of the state."""
    K, M, N, m = shape
    t = grid.nodes
    a = rng.standard_normal((3, m))
    omega = rng.uniform(0.5, 3.0)
    prof = a[0] + a[1] * np.cos(omega * t[:, None]) + a[2] * np.sin(omega * t[:, None])
    gain = rng.standard_normal((X.shape[-1], m)) * 0.5
    v = prof[:, None, None, :] + X @ gain
    return ControlProcess(scale * v)


def refined_stationarity_residual(c: LQCoefficients, sol: ControlSolution, x0, kappa: float,
                                  numerics: Numerics, generator: GeneratorMatrix | None = None,
                                  initial_regime: int = 0, factor: int = 4, seed_offset: int = 1_000_003,
                                  ) -> ResidualReport:
    """Stationarity residual of the fitted feedback law against a finer adjoint.

    The law rebuilt from the adjoint fits is run on a grid ``factor`` times
    finer with independent noise, and the adjoint is solved there.  On the
    solver's own grid the discrete adjoint is consistent with the discrete
    control up to the iteration tolerance, so only this comparison exposes
    the time-discretisation error of the control.
    """
    coarse = sol.forward.grid
    fine = coarse.refined(factor)
    gen = generator or validate_generator(np.zeros((c.m0, c.m0)))
    from .forward import draw_noise
    noise = draw_noise(fine, numerics.scenarios, numerics.particles, c.d, c.d0, numerics.seed + seed_offset,
                       gen, initial_regime, numerics.threads)
    law = feedback_from_solution(c, sol.fbsde.backward)
    last = coarse.n_nodes - 1
    batch, u = simulate_closed_loop(c, lambda k, t, x, mom, reg: law(min(k // factor, last), t, x, mom, reg),
                                    x0, noise)
    adj = solve_adjoint(c, batch, kappa, numerics.basis_degree, numerics.inner_sweeps)
    return stationarity_residual(c, u, adj, batch, kappa)
