"""Coefficients of the linear-quadratic control and game problems.

Blocks are stored per regime and per time piece: a block of nominal shape
``(r, c)`` is held as an array of shape ``(m0, P, r, c)``, where piece ``p``
applies on ``[breaks[p], breaks[p+1])`` and the last piece extends forever.

Diffusion blocks follow the stacked convention: ``C`` has shape ``(n*d, n)``
and the rows ``j*n:(j+1)*n`` are the loading on the j-th Brownian component.
The same stacking is used for ``Z`` and ``Z0`` so that ``C^T Z`` is the
adjoint pairing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

MATRIX_BLOCKS = ("A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar", "M", "Mbar",
                 "N", "Nbar", "Q", "Qbar", "S", "Sbar", "R", "Rbar")
VECTOR_BLOCKS = ("b", "sigma", "gamma", "q", "qbar", "r", "rbar")


class RNotInvertible(ValueError):
    pass


class RbarSumNotInvertible(ValueError):
    pass


def _block_shapes(n, m, d, d0):
    return {
        "A": (n, n), "Abar": (n, n), "B": (n, m), "Bbar": (n, m),
        "C": (n * d, n), "Cbar": (n * d, n), "D": (n * d, m), "Dbar": (n * d, m),
        "M": (n * d0, n), "Mbar": (n * d0, n), "N": (n * d0, m), "Nbar": (n * d0, m),
        "Q": (n, n), "Qbar": (n, n), "S": (m, n), "Sbar": (m, n), "R": (m, m), "Rbar": (m, m),
        "b": (n,), "sigma": (n * d,), "gamma": (n * d0,), "q": (n,), "qbar": (n,),
        "r": (m,), "rbar": (m,),
    }


def _expand(value, shape, m0, pieces, name):
    """Broadcast a block given per problem, per regime, or per regime and piece."""
    target = (m0, pieces) + shape
    if value is None:
        return np.zeros(target)
    arr = np.asarray(value, dtype=float)
    k = len(shape)
    if arr.ndim < k or arr.shape[arr.ndim - k:] != shape:
        if int(np.prod(shape)) != 1:
            raise ValueError(f"block {name}: cannot use shape {arr.shape} for nominal shape {shape}")
        arr = arr.reshape(arr.shape + shape)
    lead = arr.shape[:arr.ndim - k]
    if lead == (m0,):
        arr = arr[:, None]
    elif lead not in ((), (m0, pieces)):
        raise ValueError(f"block {name}: leading axes {lead} match neither ({m0},) nor ({m0}, {pieces})")
    return np.broadcast_to(arr, target).copy()


@dataclass(frozen=True)
class LQCoefficients:
    n: int
    m: int
    d: int
    d0: int
    m0: int
    breaks: np.ndarray
    kappa_star: float
    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    M: np.ndarray
    Mbar: np.ndarray
    N: np.ndarray
    Nbar: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    S: np.ndarray
    Sbar: np.ndarray
    R: np.ndarray
    Rbar: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    q: np.ndarray
    qbar: np.ndarray
    r: np.ndarray
    rbar: np.ndarray

    @property
    def pieces(self) -> int:
        return self.breaks.size

    def piece_index(self, t) -> np.ndarray:
        idx = np.searchsorted(self.breaks, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.pieces - 1)

    def blocks(self) -> dict:
        return {name: getattr(self, name) for name in MATRIX_BLOCKS + VECTOR_BLOCKS}

    def with_blocks(self, **changes) -> "LQCoefficients":
        shapes = _block_shapes(self.n, self.m, self.d, self.d0)
        expanded = {k: _expand(v, shapes[k], self.m0, self.pieces, k) for k, v in changes.items()}
        return replace(self, **expanded)

    def is_regime_free(self) -> bool:
        """True when every regime carries identical coefficients."""
        return all(np.array_equal(v, v[:1].repeat(self.m0, axis=0)) for v in self.blocks().values())


def make_lq(n: int = 1, m: int = 1, d: int = 1, d0: int = 1, m0: int = 1, breaks=(0.0,),
            kappa_star: float = 0.0, **blocks) -> LQCoefficients:
    """Build coefficients; unspecified blocks are zero.

    Each block may be given with its nominal shape (shared by all regimes and
    pieces), with a leading regime axis, or with leading regime and piece axes.
    Scalars are accepted for 1x1 blocks.
    """
    unknown = set(blocks) - set(MATRIX_BLOCKS + VECTOR_BLOCKS)
    if unknown:
        raise TypeError(f"unknown blocks: {sorted(unknown)}")
    breaks = np.atleast_1d(np.asarray(breaks, dtype=float))
    if breaks.ndim != 1 or breaks.size < 1 or np.any(np.diff(breaks) <= 0):
        raise ValueError("breakpoints must be strictly increasing")
    shapes = _block_shapes(n, m, d, d0)
    arrays = {k: _expand(blocks.get(k), shapes[k], m0, breaks.size, k) for k in shapes}
    for name in ("Q", "Qbar", "R", "Rbar"):
        a = arrays[name]
        if not np.allclose(a, np.swapaxes(a, -1, -2), atol=1e-10, rtol=0):
            raise ValueError(f"{name} must be symmetric")
    return LQCoefficients(n=n, m=m, d=d, d0=d0, m0=m0, breaks=breaks,
                          kappa_star=float(kappa_star), **arrays)


@dataclass(frozen=True)
class GameCoefficients:
    """Game data: the control-problem blocks plus the two cross couplings.

    ``lq.Sbar`` is not used by the game; ``S1bar`` couples the population
    state to the own control and ``S2bar`` the own state to the population
    control.  ``k`` is the declared proportionality constant of the bar
    control loadings (``None`` when not asserted).
    """

    lq: LQCoefficients
    S1bar: np.ndarray
    S2bar: np.ndarray
    k: float | None = None


def make_game(lq: LQCoefficients, S1bar=None, S2bar=None, k=None) -> GameCoefficients:
    shape = (lq.m, lq.n)
    return GameCoefficients(lq, _expand(S1bar, shape, lq.m0, lq.pieces, "S1bar"),
                            _expand(S2bar, shape, lq.m0, lq.pieces, "S2bar"),
                            None if k is None else float(k))


# --------------------------------------------------------------------------
# transformed blocks

def _T(a):
    return np.swapaxes(a, -1, -2)


def _inverse(a, exc, what):
    cond = np.linalg.cond(a)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
        raise exc(f"{what} is singular or ill-conditioned (cond {np.max(cond):.3g})")
    return np.linalg.inv(a)


def _vec(mat, v):
    return np.einsum("...ij,...j->...i", mat, v)


@dataclass(frozen=True)
class TransformedCoefficients:
    """Blocks after removing the state-control cross terms from the cost."""

    A: np.ndarray
    Abar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    M: np.ndarray
    Mbar: np.ndarray
    Q: np.ndarray
    Qbar: np.ndarray
    q: np.ndarray
    qbar: np.ndarray
    Rinv: np.ndarray
    RRinv: np.ndarray


def eliminate_cross_terms(c: LQCoefficients) -> TransformedCoefficients:
    Ri = _inverse(c.R, RNotInvertible, "R")
    RRi = _inverse(c.R + c.Rbar, RbarSumNotInvertible, "R + Rbar")
    S, SS = c.S, c.S + c.Sbar
    RiS = Ri @ S
    RRiSS = RRi @ SS
    rr = c.r + c.rbar
    Q = c.Q - _T(S) @ RiS
    Qbar = c.Qbar + _T(S) @ RiS - _T(SS) @ RRiSS
    return TransformedCoefficients(
        A=c.A - c.B @ RiS,
        Abar=c.Abar + c.B @ RiS - (c.B + c.Bbar) @ RRiSS,
        C=c.C - c.D @ RiS,
        Cbar=c.Cbar + c.D @ RiS - (c.D + c.Dbar) @ RRiSS,
        M=c.M - c.N @ RiS,
        Mbar=c.Mbar + c.N @ RiS - (c.N + c.Nbar) @ RRiSS,
        Q=0.5 * (Q + _T(Q)),
        Qbar=0.5 * (Qbar + _T(Qbar)),
        q=c.q - _vec(_T(S) @ Ri, c.r),
        qbar=c.qbar + _vec(_T(S) @ Ri, c.r) - _vec(_T(SS) @ RRi, rr),
        Rinv=Ri, RRinv=RRi,
    )


def gather(block: np.ndarray, c: LQCoefficients, t, regime) -> np.ndarray:
    """Block values for the given time(s) and regime(s).

    ``t`` is a scalar or an array of node times of shape (K,); ``regime`` is
    (M,) or (K, M).  Returns shape ``regime.shape + block.shape[2:]``.
    """
    regime = np.asarray(regime)
    piece = c.piece_index(t)
    if np.ndim(piece) == 1 and regime.ndim == 2:
        piece = piece[:, None]
    return block[regime, piece]


def apply(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-scenario matrix ``mat[..., M, r, c]`` applied to ``x[..., M, N, c]``."""
    return np.einsum("...ij,...pj->...pi", mat, x)


def _control_shift(c: LQCoefficients, X, EX, t, regime):
    Ri = gather(np.linalg.inv(c.R), c, t, regime)
    RRi = gather(np.linalg.inv(c.R + c.Rbar), c, t, regime)
    S = gather(c.S, c, t, regime)
    SS = S + gather(c.Sbar, c, t, regime)
    return apply(Ri @ S, X - EX) + apply(RRi @ SS, EX)


def transform_control(c: LQCoefficients, X, EX, u, t, regime) -> np.ndarray:
    """``u + R^-1 S (X - E0 X) + (R + Rbar)^-1 (S + Sbar) E0 X`` per particle.

    ``X`` has shape (..., M, N, n), ``EX`` is its within-scenario mean
    (..., M, 1, n) and ``u`` is (..., M, N, m).
    """
    return np.asarray(u) + _control_shift(c, X, EX, t, regime)


def untransform_control(c: LQCoefficients, X, EX, uu, t, regime) -> np.ndarray:
    return np.asarray(uu) - _control_shift(c, X, EX, t, regime)


def twin_without_cross_terms(c: LQCoefficients) -> LQCoefficients:
    """Problem with the transformed blocks and S = Sbar = 0; same optimum after untransforming."""
    tc = eliminate_cross_terms(c)
    return replace(c, A=tc.A, Abar=tc.Abar, C=tc.C, Cbar=tc.Cbar, M=tc.M, Mbar=tc.Mbar,
                   Q=tc.Q, Qbar=tc.Qbar, q=tc.q, qbar=tc.qbar,
                   S=np.zeros_like(c.S), Sbar=np.zeros_like(c.Sbar))


# --------------------------------------------------------------------------
# admissibility constants

def _lmax(sym):
    return float(np.max(np.linalg.eigvalsh(0.5 * (sym + _T(sym)))))


def _norm2(a):
    if a.size == 0:
        return np.zeros(a.shape[:-2])
    return np.linalg.norm(a, ord=2, axis=(-2, -1)) ** 2


@dataclass(frozen=True)
class KappaBounds:
    kappa_x: float
    kappa_xmu: float
    kappa_y: float
    kappa_ynu: float
    K: float
    kappa_bar: float
    kappa_under: float
    feasible_kappa: float
    window_ok: bool
    kappa: float
    kappa_star: float
    variant: str = "control"

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _assemble_bounds(kx, kxm, ky, kyn, K, kappa, kappa_star, variant):
    kbar = min(-kx - (kxm if kxm > 0 else 0.0), kappa_star)
    kund = 2.0 * (ky + (kyn if kyn > 0 else 0.0) + K)
    feasible = -kx / 2.0 + ky
    return KappaBounds(kx, kxm, ky, kyn, K, kbar, kund, feasible,
                       bool(kund < feasible < kbar), float(kappa), float(kappa_star), variant)


def compute_kappa_bounds(tc: TransformedCoefficients, kappa: float, kappa_star: float) -> KappaBounds:
    A, C, M = tc.A, tc.C, tc.M
    CtC, MtM = _T(C) @ C, _T(M) @ M
    Cs, Ms = C + tc.Cbar, M + tc.Mbar
    kx = _lmax(A + _T(A) + CtC + MtM)
    kxm = _lmax(tc.Abar + _T(tc.Abar) + _T(Cs) @ Cs - CtC + _T(Ms) @ Ms - MtM)
    ky = kappa + 0.5 * _lmax(A + _T(A))
    kyn = 0.5 * _lmax(tc.Abar + _T(tc.Abar))
    bars = np.maximum(np.maximum(_norm2(tc.Qbar), _norm2(tc.Cbar)), _norm2(tc.Mbar))
    K = float(np.max(_norm2(tc.Q) + _norm2(C) + _norm2(M) + bars))
    return _assemble_bounds(kx, kxm, ky, kyn, K, kappa, kappa_star, "control")


# --------------------------------------------------------------------------
# positive definiteness and game structure

@dataclass(frozen=True)
class CheckEntry:
    name: str
    regime: int
    piece: int
    value: float
    ok: bool


@dataclass(frozen=True)
class CheckReport:
    passed: bool
    entries: list = field(default_factory=list)
    delta: float = 1e-8

    @property
    def failures(self) -> list:
        return [e for e in self.entries if not e.ok]

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "delta": self.delta,
            "failures": [vars(e) for e in self.failures],
            "checks": sorted({e.name for e in self.entries}),
        }


def _min_eig(mats):
    return np.linalg.eigvalsh(0.5 * (mats + _T(mats)))[..., 0]


def _per_cell(name, values, ok, entries):
    m0, P = values.shape
    for i in range(m0):
        for p in range(P):
            entries.append(CheckEntry(name, i, p, float(values[i, p]), bool(ok[i, p])))


def _block(a, b, c, d):
    top = np.concatenate([a, b], axis=-1)
    bottom = np.concatenate([c, d], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def check_positive_definiteness(c: LQCoefficients, delta: float = 1e-8,
                                psd_tol: float = 1e-10) -> CheckReport:
    entries: list[CheckEntry] = []
    RR = c.R + c.Rbar
    SS = c.S + c.Sbar
    first = _block(c.Q, _T(c.S), c.S, c.R)
    second = _block(c.Q + c.Qbar, _T(SS), SS, RR)
    for name, mats, floor in (("R", c.R, delta), ("R+Rbar", RR, delta),
                              ("[[Q,S^T],[S,R]]", first, -psd_tol),
                              ("[[Q+Qbar,(S+Sbar)^T],[S+Sbar,R+Rbar]]", second, -psd_tol)):
        lam = _min_eig(mats)
        _per_cell(name, lam, lam >= floor, entries)
    return CheckReport(all(e.ok for e in entries), entries, delta)


def check_game_structure(g: GameCoefficients, delta: float = 1e-8, tol: float = 1e-10,
                         psd_tol: float = 1e-10) -> CheckReport:
    c = g.lq
    k = 0.0 if g.k is None else g.k
    entries: list[CheckEntry] = []

    def deviation(name, arr):
        dev = np.abs(arr).reshape(c.m0, c.pieces, -1).max(axis=-1, initial=0.0)
        _per_cell(name, dev, dev <= tol, entries)

    deviation("Abar = 0", c.Abar)
    deviation("Cbar = 0", c.Cbar)
    deviation("Mbar = 0", c.Mbar)
    deviation("Bbar = k*B", c.Bbar - k * c.B)
    deviation("Dbar = k*D", c.Dbar - k * c.D)
    deviation("Nbar = k*N", c.Nbar - k * c.N)
    ok_k = np.full((c.m0, c.pieces), k >= -1.0)
    _per_cell("k >= -1", np.full((c.m0, c.pieces), k), ok_k, entries)
    deviation("k*S + (k+1)*S1bar - S2bar = 0", k * c.S + (k + 1.0) * g.S1bar - g.S2bar)
    RR = c.R + c.Rbar
    first = _block(c.Q, _T(c.S), c.S, c.R)
    second = _block(c.Q + c.Qbar, _T(c.S + g.S2bar), c.S + g.S1bar, RR)
    for name, mats, floor in (("R", c.R, delta), ("R+Rbar", RR, delta),
                              ("[[Q,S^T],[S,R]]", first, -psd_tol),
                              ("[[Q+Qbar,(S+S2bar)^T],[S+S1bar,R+Rbar]]", second, -psd_tol)):
        lam = _min_eig(mats)
        _per_cell(name, lam, lam >= floor, entries)
    return CheckReport(all(e.ok for e in entries), entries, delta)


@dataclass(frozen=True)
class GameTransformed:
    """Blocks of the best-response and equilibrium systems of the game."""

    A: np.ndarray
    C: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    Atil: np.ndarray
    Ctil: np.ndarray
    Mtil: np.ndarray
    Qtil: np.ndarray
    AA: np.ndarray
    CC: np.ndarray
    MM: np.ndarray
    Rinv: np.ndarray
    RRinv: np.ndarray


def game_blocks(g: GameCoefficients) -> GameTransformed:
    c = g.lq
    Ri = _inverse(c.R, RNotInvertible, "R")
    RRi = _inverse(c.R + c.Rbar, RbarSumNotInvertible, "R + Rbar")
    RiS = Ri @ c.S
    own = RRi @ (c.S + g.S1bar)      # (R+Rbar)^-1 (S + S1bar)
    other = RRi @ (c.S + g.S2bar)    # (R+Rbar)^-1 (S + S2bar)
    Q = c.Q - _T(c.S) @ RiS
    Qtil = c.Qbar + _T(c.S) @ RiS - _T(c.S + g.S2bar) @ own
    return GameTransformed(
        A=c.A - c.B @ RiS, C=c.C - c.D @ RiS, M=c.M - c.N @ RiS, Q=0.5 * (Q + _T(Q)),
        Atil=c.Abar + c.B @ RiS - (c.B + c.Bbar) @ own,
        Ctil=c.Cbar + c.D @ RiS - (c.D + c.Dbar) @ own,
        Mtil=c.Mbar + c.N @ RiS - (c.N + c.Nbar) @ own,
        Qtil=Qtil,
        AA=c.B @ RiS - c.B @ other,
        CC=c.D @ RiS - c.D @ other,
        MM=c.N @ RiS - c.N @ other,
        Rinv=Ri, RRinv=RRi,
    )


def compute_game_kappa_bounds(g: GameCoefficients, kappa: float, kappa_star: float) -> KappaBounds:
    gb = game_blocks(g)
    A, C, M = gb.A, gb.C, gb.M
    CtC, MtM = _T(C) @ C, _T(M) @ M
    Cs, Ms = C + gb.Ctil, M + gb.Mtil
    kx = _lmax(A + _T(A) + CtC + MtM)
    kxn = _lmax(gb.Atil + _T(gb.Atil) + _T(Cs) @ Cs - CtC + _T(Ms) @ Ms - MtM)
    ky = kappa + 0.5 * _lmax(A + _T(A))
    kyn = 0.5 * _lmax(gb.AA + _T(gb.AA))
    bars = np.maximum(np.maximum(_norm2(gb.Qtil), _norm2(gb.CC)), _norm2(gb.MM))
    K = float(np.max(_norm2(gb.Q) + _norm2(C) + _norm2(M) + bars))
    return _assemble_bounds(kx, kxn, ky, kyn, K, kappa, kappa_star, "game")


def best_response_kappa_window(g: GameCoefficients, kappa: float, kappa_star: float) -> tuple[float, float]:
    """Window for the frozen-profile problem: (lower, upper)."""
    gb = game_blocks(g)
    kx = _lmax(gb.A + _T(gb.A) + _T(gb.C) @ gb.C + _T(gb.M) @ gb.M)
    ky = kappa + 0.5 * _lmax(gb.A + _T(gb.A))
    upper = min(-kx, kappa_star)
    lower = 2.0 * (ky + float(np.max(_norm2(gb.Q) + _norm2(gb.C) + _norm2(gb.M))))
    return lower, upper
