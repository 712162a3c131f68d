"""Mean-field linear-quadratic games with regime switching and common noise.

A representative player faces a population profile ``(Xp, up)`` that is
measurable with respect to the common noise and the regime path.  Given the
profile, its problem is an ordinary control problem whose affine data absorb
the profile:

    b_eff = Abar Xp + Bbar up + b,        r_eff = S1bar Xp + Rbar up + r,
    q_eff = Qbar Xp + S2bar^T up + q      (and likewise for both diffusions).

An equilibrium is a control whose own conditional means reproduce the
profile.  Two routes are provided: ``direct`` solves the single coupled
system obtained by substituting the consistency condition, ``iterate``
alternates best responses with the conditional-mean projection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .backward import BackwardSolution
from .coeffs import (GameCoefficients, LQCoefficients, apply, check_game_structure, compute_game_kappa_bounds,
                     compute_kappa_bounds, eliminate_cross_terms, gather, untransform_control)
from .coupled import (FBSDEProblem, FBSDESolution, MonotonicityReport, NoConvergence, Numerics, TestFunctionals,
                      solve_fbsde_continuation, solve_fbsde_picard, verify_domination_monotonicity,
                      weighted_sq)
from .forward import CoefficientCallbacks, EnsembleBatch, NoiseBundle, simulate_conditional_mkv_sde
from .grid import TimeGrid, trapezoid
from .lq import (ControlProcess, CostBreakdown, GridMismatch, PDViolation, _flat, _rho, _T, _unflat,
                 assemble_control_hamiltonian, control_from_adjoint, cost_integrands, random_direction)
from .regime import GeneratorMatrix, validate_generator

__all__ = [
    "PopulationProfile", "BestResponse", "EquilibriumReport", "NashTable", "bars_zeroed", "best_response",
    "project_profile", "assemble_game_hamiltonian", "equilibrium_control", "solve_game_fixed_point",
    "simulate_game_state", "evaluate_game_cost", "nash_deviation_test", "game_functionals",
    "verify_game_monotonicity", "write_deviation_csv",
]


# --------------------------------------------------------------------------
# profiles

@dataclass(frozen=True)
class PopulationProfile:
    """Population state ``X`` (n_nodes, M, n) and control ``u`` (n_nodes, M, m), one path per scenario."""

    X: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if self.X.ndim != 3 or self.u.ndim != 3 or self.X.shape[:2] != self.u.shape[:2]:
            raise GridMismatch(f"profile shapes {self.X.shape} and {self.u.shape} do not match")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.u))):
            raise ValueError("profile must be finite")

    @staticmethod
    def zeros(grid: TimeGrid, scenarios: int, n: int, m: int) -> "PopulationProfile":
        return PopulationProfile(np.zeros((grid.n_nodes, scenarios, n)), np.zeros((grid.n_nodes, scenarios, m)))

    def blend(self, other: "PopulationProfile", w: float) -> "PopulationProfile":
        return PopulationProfile((1 - w) * self.X + w * other.X, (1 - w) * self.u + w * other.u)

    def distance(self, other: "PopulationProfile", grid: TimeGrid, kappa: float) -> float:
        """Weighted L2 distance ``sqrt(int e^{kappa s} |dX|^2 + |du|^2 ds)`` averaged over scenarios."""
        return float(np.sqrt(weighted_sq(grid, kappa, (self.X - other.X)[:, :, None],
                                         (self.u - other.u)[:, :, None])))


def project_profile(u: ControlProcess, X) -> PopulationProfile:
    """Within-scenario particle means of state and control at every node."""
    Xa = X.X if isinstance(X, EnsembleBatch) else np.asarray(X)
    if Xa.shape[:3] != u.u.shape[:3]:
        raise GridMismatch(f"control {u.u.shape[:3]} vs state {Xa.shape[:3]}")
    return PopulationProfile(Xa.mean(axis=2), u.u.mean(axis=2))


def _node(grid: TimeGrid, t: float) -> int:
    return int(round((t - grid.t0) / grid.dt))


def bars_zeroed(c: LQCoefficients) -> LQCoefficients:
    """The same problem with every population coupling removed."""
    zero = {name: np.zeros_like(getattr(c, name)) for name in
            ("Abar", "Bbar", "Cbar", "Dbar", "Mbar", "Nbar", "Qbar", "Sbar", "Rbar", "qbar", "rbar")}
    return replace(c, **zero)


# --------------------------------------------------------------------------
# best response

class BestResponse(NamedTuple):
    u: ControlProcess
    X: EnsembleBatch
    fbsde: FBSDESolution


def _profile_terms(g: GameCoefficients, profile: PopulationProfile, grid: TimeGrid):
    """Per-node profile contributions to ``r``, ``b``, ``sigma``, ``gamma`` and ``q``, each (M, 1, .)."""
    c = g.lq
    G = lambda blk, t, reg: gather(blk, c, t, reg)

    def at(t, reg):
        k = _node(grid, t)
        Xp, up = profile.X[k][:, None, :], profile.u[k][:, None, :]
        lin = lambda a, b: apply(G(a, t, reg), Xp) + apply(G(b, t, reg), up)
        r_e = apply(gather(g.S1bar, c, t, reg), Xp) + apply(G(c.Rbar, t, reg), up)
        q_e = apply(G(c.Qbar, t, reg), Xp) + apply(_T(gather(g.S2bar, c, t, reg)), up)
        return r_e, lin(c.Abar, c.Bbar), lin(c.Cbar, c.Dbar), lin(c.Mbar, c.Nbar), q_e

    return at


def _best_response_problem(g: GameCoefficients, profile: PopulationProfile, kappa: float, x0, grid: TimeGrid,
                           generator: GeneratorMatrix, initial_regime: int, numerics: Numerics) -> FBSDEProblem:
    c0 = bars_zeroed(g.lq)
    tc0 = eliminate_cross_terms(c0)
    p0 = assemble_control_hamiltonian(tc0, c0, kappa, x0, grid, generator, initial_regime, numerics,
                                      compute_kappa_bounds(tc0, kappa, c0.kappa_star))
    if not np.any(profile.X) and not np.any(profile.u):
        return p0
    terms = _profile_terms(g, profile, grid)
    G = lambda blk, t, reg: gather(blk, c0, t, reg)

    def shifted(base, which, ctrl, k):
        def h(t, reg):
            r_e, *rest = terms(t, reg)
            extra = rest[which] - apply(G(ctrl, t, reg) @ G(tc0.Rinv, t, reg), r_e)
            return base(t, reg) + (extra if k is None else _unflat(extra, k))
        return h

    def f0(t, reg):
        r_e, _, _, _, q_e = terms(t, reg)
        return p0.f0(t, reg) + q_e - apply(_T(G(c0.S, t, reg)) @ G(tc0.Rinv, t, reg), r_e)

    return replace(p0, b0=shifted(p0.b0, 0, c0.B, None), sigma0=shifted(p0.sigma0, 1, c0.D, c0.d),
                   sigma_tilde0=shifted(p0.sigma_tilde0, 2, c0.N, c0.d0), f0=f0)


def _best_response_control(g: GameCoefficients, profile: PopulationProfile, grid: TimeGrid, noise: NoiseBundle,
                           sol: FBSDESolution) -> ControlProcess:
    c0 = bars_zeroed(g.lq)
    tc0 = eliminate_cross_terms(c0)
    u, _ = control_from_adjoint(c0, tc0, grid, noise.states, sol.forward.X, sol.backward.Y, sol.backward.Z,
                                sol.backward.Z0)
    if np.any(profile.X) or np.any(profile.u):
        terms = _profile_terms(g, profile, grid)
        uu = u.u.copy()
        for k, t in enumerate(grid.nodes):
            reg = noise.states[k]
            uu[k] = uu[k] - apply(gather(tc0.Rinv, c0, t, reg), terms(t, reg)[0])
        u = ControlProcess(uu)
    return u


def best_response(g: GameCoefficients, profile: PopulationProfile, x_t, initial_regime: int = 0,
                  numerics: Numerics | None = None, kappa: float = 0.0, T: float = 5.0, t0: float = 0.0,
                  generator: GeneratorMatrix | None = None, noise: NoiseBundle | None = None,
                  start: FBSDESolution | None = None, tol: float | None = None) -> BestResponse:
    """Optimal control of one player against a frozen population profile.

    ``u* = -R^-1 (S X + B^T Y + D^T Z + N^T Z0 + S1bar Xp + Rbar up + r)``.
    With a zero profile the underlying system is exactly the control problem
    with every population coupling removed.
    """
    numerics = numerics or Numerics()
    report = check_game_structure(g)
    bad = [e for e in report.failures if e.name == "R"]
    if bad:
        raise PDViolation(f"R has smallest eigenvalue {bad[0].value:.3g} (regime {bad[0].regime})")
    grid = TimeGrid(t0, T, numerics.dt)
    gen = generator or validate_generator(np.zeros((g.lq.m0, g.lq.m0)))
    noise = noise or _noise(g, grid, gen, initial_regime, numerics)
    if profile.X.shape[:2] != (grid.n_nodes, noise.scenarios):
        raise GridMismatch(f"profile {profile.X.shape[:2]} does not fit the grid and scenario count")
    p = _best_response_problem(g, profile, kappa, x_t, grid, gen, initial_regime, numerics)
    sol = solve_fbsde_picard(p, noise=noise, start=start, tol=tol)
    return BestResponse(_best_response_control(g, profile, grid, noise, sol), sol.forward, sol)


def _noise(g: GameCoefficients, grid, gen, initial_regime, numerics) -> NoiseBundle:
    from .forward import draw_noise
    c = g.lq
    return draw_noise(grid, numerics.scenarios, numerics.particles, c.d, c.d0, numerics.seed, gen,
                      initial_regime, numerics.threads)


# --------------------------------------------------------------------------
# equilibrium system

def _regime_free(g: GameCoefficients) -> bool:
    same = lambda v: np.array_equal(v, v[:1].repeat(g.lq.m0, axis=0))
    return g.lq.is_regime_free() and same(g.S1bar) and same(g.S2bar)


def _equilibrium_parts(g: GameCoefficients, t, reg, x, Ex, y, z, z0, Ey, Ez, Ez0):
    """Affine-free part of the equilibrium control and of its scenario mean."""
    c = g.lq
    G = lambda blk: gather(blk, c, t, reg)
    Ri, RRi = np.linalg.inv(G(c.R)), np.linalg.inv(G(c.R) + G(c.Rbar))
    r1 = _rho(c, t, reg, y, z, z0, bar=False)
    r1m = _rho(c, t, reg, Ey, Ez, Ez0, bar=False)
    mean = -apply(RRi, apply(G(c.S) + gather(g.S1bar, c, t, reg), Ex) + r1m)
    return -apply(Ri, apply(G(c.S), x - Ex) + r1 - r1m) + mean, mean


def _equilibrium_constant(g: GameCoefficients, t, reg):
    c = g.lq
    G = lambda blk: gather(blk, c, t, reg)
    return -apply(np.linalg.inv(G(c.R) + G(c.Rbar)), G(c.r)[:, None, :])


def assemble_game_hamiltonian(g: GameCoefficients, kappa: float, x0=0.0, grid: TimeGrid | None = None,
                              generator: GeneratorMatrix | None = None, initial_regime: int = 0,
                              numerics: Numerics | None = None) -> FBSDEProblem:
    """Coupled system whose solution is the equilibrium.

    The equilibrium control is

        u = -R^-1 (S (X - E0X) + rho1 - E0 rho1) - (R+Rbar)^-1 ((S+S1bar) E0X + E0 rho1 + r)

    with ``rho1 = B^T Y + D^T Z + N^T Z0``.  The state carries the population
    terms through ``E0X`` and ``E0u``; the adjoint driver is

        f = (kappa + A)^T y + C^T z + M^T z0 + Q x + S^T u + Qbar E0X + S2bar^T E0u + q.
    """
    grid = grid or TimeGrid(0.0, 1.0, 0.02)
    c = g.lq
    d, d0 = c.d, c.d0
    G = lambda blk, t, reg: gather(blk, c, t, reg)
    bounds = compute_game_kappa_bounds(g, kappa, c.kappa_star)

    def parts(t, x, y, z, z0, mom, reg):
        return _equilibrium_parts(g, t, reg, x, mom.x, y, z, z0, mom.y, mom.z, mom.z0)

    def state(lin, bar, ctrl, ctrl_bar):
        def h(t, x, y, z, z0, mom, reg):
            u, um = parts(t, x, y, z, z0, mom, reg)
            return (apply(G(lin, t, reg), x) + apply(G(bar, t, reg), mom.x) + apply(G(ctrl, t, reg), u)
                    + apply(G(ctrl_bar, t, reg), um))
        return h

    b_ = state(c.A, c.Abar, c.B, c.Bbar)
    s_ = state(c.C, c.Cbar, c.D, c.Dbar)
    g_ = state(c.M, c.Mbar, c.N, c.Nbar)

    def f(t, x, y, z, z0, mom, reg):
        u, um = parts(t, x, y, z, z0, mom, reg)
        out = kappa * y + apply(_T(G(c.A, t, reg)), y) + apply(G(c.Q, t, reg), x)
        out = out + apply(_T(G(c.S, t, reg)), u) + apply(G(c.Qbar, t, reg), mom.x)
        out = out + apply(_T(gather(g.S2bar, c, t, reg)), um)
        if d:
            out = out + apply(_T(G(c.C, t, reg)), _flat(z))
        if d0:
            out = out + apply(_T(G(c.M, t, reg)), _flat(z0))
        return out

    def additive(vec, ctrl, ctrl_bar, k):
        def h(t, reg):
            uc = _equilibrium_constant(g, t, reg)
            out = G(vec, t, reg)[:, None, :] + apply(G(ctrl, t, reg) + G(ctrl_bar, t, reg), uc)
            return out if k is None else _unflat(out, k)
        return h

    def f0(t, reg):
        uc = _equilibrium_constant(g, t, reg)
        SS = G(c.S, t, reg) + gather(g.S2bar, c, t, reg)
        return G(c.q, t, reg)[:, None, :] + apply(_T(SS), uc)

    return FBSDEProblem(
        n=c.n, d=d, d0=d0, grid=grid, x0=x0, b=b_,
        sigma=lambda *a: _unflat(s_(*a), d), sigma_tilde=lambda *a: _unflat(g_(*a), d0), f=f,
        b0=additive(c.b, c.B, c.Bbar, None), sigma0=additive(c.sigma, c.D, c.Dbar, d),
        sigma_tilde0=additive(c.gamma, c.N, c.Nbar, d0), f0=f0,
        generator=generator or validate_generator(np.zeros((c.m0, c.m0))), initial_regime=initial_regime,
        kappa=float(kappa), kappa_star=c.kappa_star, kappa_x=bounds.kappa_x, kappa_y=bounds.kappa_y,
        regime_free=_regime_free(g), numerics=numerics or Numerics())


def equilibrium_control(g: GameCoefficients, grid: TimeGrid, states: np.ndarray, X, Y, Z, Z0) -> ControlProcess:
    """Equilibrium control along whole trajectories from the solved coupled system."""
    u = np.empty(X.shape[:3] + (g.lq.m,))
    for k, t in enumerate(grid.nodes):
        reg = states[k]
        mean = lambda a: a.mean(axis=1, keepdims=True)
        lin, _ = _equilibrium_parts(g, t, reg, X[k], mean(X[k]), Y[k], Z[k], Z0[k],
                                    mean(Y[k]), mean(Z[k]), mean(Z0[k]))
        u[k] = lin + _equilibrium_constant(g, t, reg)
    return ControlProcess(u)


# --------------------------------------------------------------------------
# state and cost against a frozen profile

def simulate_game_state(g: GameCoefficients, u: ControlProcess, profile: PopulationProfile, x0,
                        noise: NoiseBundle) -> EnsembleBatch:
    """Player state under an open-loop control with the population frozen at ``profile``."""
    c = g.lq
    grid = noise.grid
    if u.u.shape[0] != grid.n_nodes or profile.X.shape[0] != grid.n_nodes:
        raise GridMismatch("control, profile and noise live on different grids")
    G = lambda blk, t, reg: gather(blk, c, t, reg)

    def part(vec, lin, bar, ctrl, ctrl_bar):
        def h(t, x, mom, reg):
            k = mom.k
            Xp, up = profile.X[k][:, None, :], profile.u[k][:, None, :]
            return (G(vec, t, reg)[:, None, :] + apply(G(lin, t, reg), x) + apply(G(bar, t, reg), Xp)
                    + apply(G(ctrl, t, reg), u.u[k]) + apply(G(ctrl_bar, t, reg), up))
        return h

    b = part(c.b, c.A, c.Abar, c.B, c.Bbar)
    s = part(c.sigma, c.C, c.Cbar, c.D, c.Dbar)
    st = part(c.gamma, c.M, c.Mbar, c.N, c.Nbar)
    cb = CoefficientCallbacks(b, lambda *a: _unflat(s(*a), c.d), lambda *a: _unflat(st(*a), c.d0))
    return simulate_conditional_mkv_sde(cb, x0, noise)


def evaluate_game_cost(g: GameCoefficients, u: ControlProcess, batch: EnsembleBatch, profile: PopulationProfile,
                       kappa: float) -> CostBreakdown:
    """Player cost against the profile; ``mean_field`` collects every profile-dependent term."""
    c = g.lq
    X, grid, states = batch.X, batch.grid, batch.noise.states
    if u.u.shape[:3] != X.shape[:3]:
        raise GridMismatch(f"control {u.u.shape[:3]} vs state {X.shape[:3]}")
    t = grid.nodes
    G = lambda blk: gather(blk, c, t, states)
    S1, S2 = gather(g.S1bar, c, t, states), gather(g.S2bar, c, t, states)
    state, control, cross, _, lin = cost_integrands(bars_zeroed(c), X, u.u, grid, states)
    Xp, up = profile.X, profile.u
    dot = lambda a, b: np.einsum("kspi,kspi->ksp", a, b)
    mv = lambda mat, v: np.einsum("ksij,ksj->ksi", mat, v)[:, :, None, :]
    pop = (dot(X, mv(G(c.Qbar), Xp)) + dot(u.u, mv(S1, Xp)) + dot(X, mv(np.swapaxes(S2, -1, -2), up))
           + dot(u.u, mv(G(c.Rbar), up)))
    pop = pop + (np.einsum("ksi,ksi->ks", G(c.qbar), Xp) + np.einsum("ksi,ksi->ks", G(c.rbar), up))[:, :, None]
    w = np.exp(kappa * grid.nodes)[:, None, None]
    factors = (0.5, 0.5, 1.0, 1.0, 1.0)
    per_particle = [f * trapezoid(w * p, grid.dt) for f, p in zip(factors, (state, control, cross, pop, lin))]
    totals = sum(per_particle)
    per_scenario = totals.mean(axis=1)
    M = totals.shape[0]
    if M >= 2:
        se = float(per_scenario.std(ddof=1) / np.sqrt(M))
    else:
        se = float(totals.std(ddof=1) / np.sqrt(totals.size)) if totals.size > 1 else 0.0
    comps = [float(pp.mean()) for pp in per_particle]
    return CostBreakdown(float(totals.mean()), comps[0], comps[1], comps[2], comps[3], comps[4], se=se,
                         tail_bound=0.0, per_scenario=per_scenario)


# --------------------------------------------------------------------------
# Nash verification

@dataclass(frozen=True)
class NashTable:
    rows: list
    all_pass: bool

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r["pass"]]


def nash_deviation_test(g: GameCoefficients, report: "EquilibriumReport", deviations: int = 20,
                        eps=(0.1, 0.3), seed: int = 0, u: ControlProcess | None = None) -> NashTable:
    """Unilateral deviations against the frozen equilibrium profile on common random numbers.

    Passes when ``J(u) <= J(u + eps v) + 2 SE`` for every random direction
    ``v`` and every ``eps``.  ``u`` overrides the candidate control (used
    to confirm that a wrong candidate is caught).
    """
    u = report.u if u is None else u
    noise, profile, kappa = report.noise, report.profile, report.kappa
    base_state = simulate_game_state(g, u, profile, report.x0, noise)
    base = evaluate_game_cost(g, u, base_state, profile, kappa)
    rng = np.random.default_rng(seed)
    rows = []
    for trial in range(deviations):
        v = random_direction(u.u.shape, noise.grid, base_state.X, rng)
        for e in eps:
            w = u + v.scaled(e)
            cost = evaluate_game_cost(g, w, simulate_game_state(g, w, profile, report.x0, noise), profile, kappa)
            slack = 2.0 * cost.se
            rows.append({"trial": trial, "eps": float(e), "J_candidate": base.total, "J_deviation": cost.total,
                         "se": cost.se, "pass": bool(base.total <= cost.total + slack)})
    return NashTable(rows, all(r["pass"] for r in rows))


def write_deviation_csv(table: NashTable, target) -> None:
    cols = ["trial", "eps", "J_candidate", "J_deviation", "se", "pass"]
    with Path(target).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in table.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


# --------------------------------------------------------------------------
# fixed point

@dataclass(frozen=True)
class EquilibriumReport:
    u: ControlProcess
    X: EnsembleBatch
    fbsde: FBSDESolution
    profile: PopulationProfile
    fixed_point_gap: float
    consistency_gap: float
    converged: bool
    mode: str
    tol: float
    kappa: float
    x0: object
    outer_gaps: list = field(default_factory=list)
    structure: object = None
    nash: NashTable | None = None

    @property
    def noise(self) -> NoiseBundle:
        return self.X.noise

    def as_dict(self) -> dict:
        return {"mode": self.mode, "converged": self.converged, "fixed_point_gap": self.fixed_point_gap,
                "consistency_gap": self.consistency_gap, "tol": self.tol, "outer_iterations": len(self.outer_gaps),
                "outer_gaps": list(map(float, self.outer_gaps)),
                "nash_all_pass": None if self.nash is None else self.nash.all_pass}


def _gaps(g, u, X, profile, x0, noise, kappa, br_args, start):
    """Fixed-point gap of ``(X, u)`` and consistency gap of ``profile``."""
    grid = noise.grid
    proj = project_profile(u, X)
    br = best_response(g, proj, x0, noise=noise, start=start, **br_args)
    fp = float(np.sqrt(weighted_sq(grid, kappa, br.X.X - X.X, br.u.u - u.u)))
    state = simulate_game_state(g, u, profile, x0, noise)
    cons = project_profile(u, state).distance(profile, grid, kappa)
    return fp, cons


def solve_game_fixed_point(g: GameCoefficients, x_t, initial_regime: int = 0, numerics: Numerics | None = None,
                           mode: str = "direct", kappa: float = 0.0, T: float = 5.0, t0: float = 0.0,
                           generator: GeneratorMatrix | None = None, noise: NoiseBundle | None = None,
                           profile_damping: float = 0.5, max_outer: int | None = None,
                           method: str = "picard", deviations: int = 0, eps=(0.1, 0.3)) -> EquilibriumReport:
    """Equilibrium control, state and diagnostics.

    ``direct`` solves the coupled equilibrium system once; ``iterate`` damps
    the profile between best responses until successive profiles differ by
    less than ``numerics.tol``.  The iterate route carries no convergence
    guarantee outside the structural conditions checked by
    :func:`~mfswitch.coeffs.check_game_structure`.
    """
    numerics = numerics or Numerics()
    structure = check_game_structure(g)
    grid = TimeGrid(t0, T, numerics.dt)
    gen = generator or validate_generator(np.zeros((g.lq.m0, g.lq.m0)))
    noise = noise or _noise(g, grid, gen, initial_regime, numerics)
    tol = numerics.tol
    br_args = dict(initial_regime=initial_regime, numerics=numerics, kappa=kappa, T=T, t0=t0, generator=gen)
    outer: list[float] = []
    if mode == "direct":
        p = assemble_game_hamiltonian(g, kappa, x_t, grid, gen, initial_regime, numerics)
        if method == "picard":
            sol = solve_fbsde_picard(p, noise=noise)
        else:
            sol = solve_fbsde_continuation(p, noise=noise)
        u = equilibrium_control(g, grid, noise.states, sol.forward.X, sol.backward.Y, sol.backward.Z,
                                sol.backward.Z0)
        X = sol.forward
        profile = project_profile(u, X)
        converged = sol.converged
    elif mode == "iterate":
        if not 0 < profile_damping <= 1:
            raise ValueError("profile damping must lie in (0, 1]")
        c = g.lq
        profile = PopulationProfile.zeros(grid, noise.scenarios, c.n, c.m)
        sol, converged = None, False
        inner_tol = 0.1 * tol
        for _ in range(max_outer or numerics.max_iters):
            br = best_response(g, profile, x_t, noise=noise, start=sol, tol=inner_tol, **br_args)
            sol = br.fbsde
            new = project_profile(br.u, br.X)
            outer.append(new.distance(profile, grid, kappa))
            if outer[-1] < tol:
                converged = True
                break
            if not np.isfinite(outer[-1]) or (len(outer) > 1 and outer[-1] > 1e6 * outer[0]):
                break
            profile = profile.blend(new, profile_damping)
        u, X = br.u, br.X
    else:
        raise ValueError(f"unknown mode {mode!r}")
    fp, cons = _gaps(g, u, X, profile, x_t, noise, kappa, br_args, sol)
    report = EquilibriumReport(u, X, sol, profile, fp, cons, converged, mode, tol, float(kappa), x_t, outer,
                               structure)
    if deviations:
        report = replace(report, nash=nash_deviation_test(g, report, deviations, eps))
    if mode == "iterate" and not converged:
        raise NoConvergence(f"profile iteration stopped at gap {outer[-1]:.3g}", report)
    return report


# --------------------------------------------------------------------------
# monotonicity of the equilibrium system

def _L2(g: GameCoefficients) -> float:
    c = g.lq
    k = 0.0 if g.k is None else g.k
    lam_r = float(np.min(np.linalg.eigvalsh(np.linalg.inv(c.R))))
    if k == -1.0:
        return 4.0 * lam_r
    lam_rr = float(np.min(np.linalg.eigvalsh(np.linalg.inv(c.R + c.Rbar))))
    return min(lam_r, (k + 1.0) * lam_rr)


def game_functionals(g: GameCoefficients) -> tuple[TestFunctionals, float]:
    """``(beta1 = min(1/L1, L2), varphi = |d rho1|^2)`` and the monotonicity constant ``L2``."""
    c = g.lq
    Ri = np.linalg.inv(c.R)
    RRi = np.linalg.inv(c.R + c.Rbar)
    nrm = lambda a: np.linalg.norm(a, ord=2, axis=(-2, -1)) ** 2 if a.size else np.zeros(a.shape[:-2])
    L1 = 2.0 * max(float(np.max(v)) for v in (
        nrm(c.B @ Ri), nrm((c.B + c.Bbar) @ RRi), nrm(c.D @ Ri), nrm((c.D + c.Dbar) @ RRi),
        nrm(c.N @ Ri), nrm((c.N + c.Nbar) @ RRi)))
    L2 = _L2(g)
    beta1 = min(1.0 / L1, L2) if L1 > 0 else L2

    def varphi(t, dy, dz, dz0, reg):
        return np.sum(_rho(c, t, reg, dy, dz, dz0, bar=False) ** 2, axis=-1)

    return TestFunctionals(beta1, varphi), L2


def verify_game_monotonicity(g: GameCoefficients, kappa: float = 0.0, samples: int = 1000, block: int = 16,
                             seed: int = 0, tol: float = 1e-8) -> MonotonicityReport:
    """Sampled check of ``LHS <= -L2 E|d rho1|^2`` on the equilibrium system, plus domination with ``beta1``."""
    p = assemble_game_hamiltonian(g, kappa, 0.0, TimeGrid(0.0, 1.0, 0.5),
                                  validate_generator(np.zeros((g.lq.m0, g.lq.m0))))
    fn, L2 = game_functionals(g)
    return verify_domination_monotonicity(p, fn, samples, block, seed, tol=tol, monotonicity_beta=L2)
