"""Command-line front end: ``check``, ``solve`` and ``convergence``.

Exit codes: 0 success, 2 validation failure, 3 malformed input,
4 solver non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .coeffs import (MATRIX_BLOCKS, VECTOR_BLOCKS, GameCoefficients, LQCoefficients, best_response_kappa_window,
                     check_game_structure, check_positive_definiteness, compute_game_kappa_bounds,
                     compute_kappa_bounds, eliminate_cross_terms, make_game, make_lq)
from .coupled import NoConvergence, Numerics, write_history_csv
from .forward import horizon_for_tail
from .game import evaluate_game_cost, simulate_game_state, solve_game_fixed_point, write_deviation_csv
from .grid import TimeGrid
from .lq import (ControlProcess, PDViolation, gain_estimate, refined_stationarity_residual, riccati_scalar_oracle,
                 solve_control_problem)
from .regime import validate_generator

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_MALFORMED, EXIT_NO_CONVERGENCE = 0, 2, 3, 4


class SpecError(ValueError):
    """The problem document cannot be parsed into a consistent problem."""


class ValidationFailure(ValueError):
    pass


# --------------------------------------------------------------------------
# problem documents

@dataclass(frozen=True)
class ProblemSpec:
    raw: dict
    sha256: str
    problem: str
    lq: LQCoefficients
    game: GameCoefficients | None
    generator: object
    initial_regime: int
    x0: np.ndarray
    t0: float
    T: float | None
    tail_tol: float | None
    kappa: float
    numerics: Numerics
    method: str
    mode: str
    nash_deviations: int
    ladder: list = field(default_factory=list)


_NUMERIC_KEYS = {f for f in Numerics.__dataclass_fields__}


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise SpecError(f"missing key '{key}' in {where}")
    return d[key]


def parse_spec(doc: dict, seed_override: int | None = None, digest: str = "") -> ProblemSpec:
    if not isinstance(doc, dict):
        raise SpecError("top level must be an object")
    problem = doc.get("problem", "control")
    if problem not in ("control", "game"):
        raise SpecError(f"problem must be 'control' or 'game', got {problem!r}")
    dims = _need(doc, "dims", "document")
    try:
        n, m, d, d0, m0 = (int(_need(dims, k, "dims")) for k in ("n", "m", "d", "d0", "m0"))
    except (TypeError, ValueError) as exc:
        raise SpecError(f"dims: {exc}") from exc
    if min(n, m, m0) < 1 or min(d, d0) < 0:
        raise SpecError("dims must be positive (d and d0 may be zero)")
    coeffs = dict(_need(doc, "coefficients", "document"))
    coeffs.update(doc.get("inhomogeneous", {}))
    breaks = coeffs.pop("breaks", [0.0])
    unknown = set(coeffs) - set(MATRIX_BLOCKS + VECTOR_BLOCKS)
    if unknown:
        raise SpecError(f"unknown coefficient blocks: {sorted(unknown)}")
    numerics_doc = doc.get("numerics", {})
    if "seed" not in numerics_doc and seed_override is None:
        raise SpecError("numerics.seed is mandatory")
    bad = set(numerics_doc) - _NUMERIC_KEYS
    if bad:
        raise SpecError(f"unknown numerics keys: {sorted(bad)}")
    try:
        lq = make_lq(n, m, d, d0, m0, breaks, float(doc.get("kappa_star", 0.0)),
                     **{k: np.asarray(v, dtype=float) for k, v in coeffs.items()})
        gen = validate_generator(doc.get("generator", np.zeros((m0, m0)).tolist()))
        if gen.m0 != m0:
            raise SpecError(f"generator has {gen.m0} states but dims.m0 = {m0}")
        nm = dict(numerics_doc)
        if "lambda_steps" in nm:
            nm["lambda_steps"] = tuple(float(v) for v in nm["lambda_steps"])
        numerics = Numerics(**nm)
        if seed_override is not None:
            numerics = replace(numerics, seed=int(seed_override))
        game = None
        if problem == "game":
            extras = doc.get("game_extras", {})
            game = make_game(lq, np.asarray(extras.get("S1bar", 0.0), float) if "S1bar" in extras else None,
                             np.asarray(extras.get("S2bar", 0.0), float) if "S2bar" in extras else None,
                             extras.get("k"))
        x0 = np.asarray(doc.get("x0", np.zeros(n)), dtype=float).reshape(-1)
        if x0.size != n:
            raise SpecError(f"x0 has {x0.size} entries, expected {n}")
    except SpecError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise SpecError(str(exc)) from exc
    horizon = doc.get("horizon", {})
    T = horizon.get("T")
    tail = horizon.get("tail_tol")
    if (T is None) == (tail is None):
        raise SpecError("horizon needs exactly one of T and tail_tol")
    initial = int(doc.get("initial_regime", 0))
    if not 0 <= initial < m0:
        raise SpecError(f"initial_regime {initial} outside 0..{m0 - 1}")
    solver = doc.get("solver", {})
    method, mode = solver.get("method", "picard"), solver.get("mode", "direct")
    if method not in ("picard", "continuation") or mode not in ("direct", "iterate"):
        raise SpecError("solver.method must be picard|continuation and solver.mode direct|iterate")
    ladder = [(float(r["dt"]), int(r["particles"]), int(r.get("scenarios", numerics.scenarios)))
              for r in doc.get("ladder", [])]
    return ProblemSpec(doc, digest, problem, lq, game, gen, initial, x0, float(horizon.get("t", 0.0)),
                       None if T is None else float(T), None if tail is None else float(tail),
                       float(doc.get("kappa", 0.0)), numerics, method, mode,
                       int(solver.get("nash_deviations", 20)), ladder)


def load_spec(path, seed_override: int | None = None) -> ProblemSpec:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: {exc}") from exc
    return parse_spec(doc, seed_override, hashlib.sha256(data).hexdigest())


# --------------------------------------------------------------------------
# checking

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _bounds(spec: ProblemSpec):
    c = spec.lq
    if spec.problem == "game":
        return compute_game_kappa_bounds(spec.game, spec.kappa, c.kappa_star)
    return compute_kappa_bounds(eliminate_cross_terms(c), spec.kappa, c.kappa_star)


def check_report(spec: ProblemSpec) -> dict:
    """Dimension, definiteness, structure and discount-window checks."""
    c = spec.lq
    report: dict = {"schema_version": SCHEMA_VERSION, "problem": spec.problem,
                    "dimensions": {"n": c.n, "m": c.m, "d": c.d, "d0": c.d0, "m0": c.m0, "pieces": c.pieces,
                                   "ok": True}}
    pd = check_positive_definiteness(c)
    report["positive_definiteness"] = pd.as_dict()
    passed = pd.passed
    if spec.problem == "game":
        st = check_game_structure(spec.game)
        report["game_structure"] = st.as_dict()
        passed = st.passed
    try:
        bounds = _bounds(spec)
        report["kappa_bounds"] = bounds.as_dict()
        report["window_ok"] = bounds.window_ok
        if spec.problem == "game":
            lo, hi = best_response_kappa_window(spec.game, spec.kappa, c.kappa_star)
            report["best_response_window"] = {"lower": lo, "upper": hi}
    except ValueError as exc:
        report["kappa_bounds"] = {"error": str(exc)}
        report["window_ok"] = False
        passed = False
    report["passed"] = bool(passed)
    report["failures"] = sorted({e["name"] for key in ("positive_definiteness", "game_structure")
                                 for e in report.get(key, {}).get("failures", [])})
    return _clean(report)


def horizon(spec: ProblemSpec) -> float:
    if spec.T is not None:
        return spec.T
    kbar = _bounds(spec).kappa_bar
    try:
        return float(horizon_for_tail(spec.t0, spec.kappa, kbar, spec.tail_tol))
    except ValueError as exc:
        raise ValidationFailure(f"tail tolerance unusable: {exc}") from exc


# --------------------------------------------------------------------------
# outputs

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_moments_csv(path: Path, values: np.ndarray, grid: TimeGrid, states: np.ndarray, prefix: str) -> None:
    """Per node and scenario: regime, conditional mean and standard deviation of each component."""
    mean = values.mean(axis=2)
    std = values.std(axis=2)
    k = values.shape[-1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "scenario", "regime"] + [f"mean_{prefix}{i}" for i in range(k)]
                   + [f"std_{prefix}{i}" for i in range(k)])
        for j, t in enumerate(grid.nodes):
            for s in range(values.shape[1]):
                w.writerow([repr(float(t)), s, int(states[j, s])] + [repr(float(v)) for v in mean[j, s]]
                           + [repr(float(v)) for v in std[j, s]])


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


@dataclass(frozen=True)
class RunManifest:
    spec_sha256: str
    version: str
    seed: int
    threads: int
    runtime_s: float
    files: dict

    def write(self, out: Path) -> None:
        _write_json(out / "manifest.json", asdict(self))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _riccati_applicable(c: LQCoefficients) -> bool:
    if (c.n, c.m, c.d, c.d0, c.pieces) != (1, 1, 1, 1, 1) or not c.is_regime_free():
        return False
    zero = ("Abar", "Bbar", "Cbar", "Dbar", "Mbar", "Nbar", "Qbar", "Sbar", "Rbar", "S", "b", "sigma", "gamma",
            "q", "qbar", "r", "rbar")
    return all(not np.any(getattr(c, k)) for k in zero)


def riccati_summary(c: LQCoefficients, kappa: float, u: ControlProcess, X: np.ndarray, grid: TimeGrid) -> dict:
    out = {"gain_estimate": gain_estimate(u, X, grid)}
    if _riccati_applicable(c):
        v = lambda name: float(getattr(c, name).ravel()[0])
        p, gain = riccati_scalar_oracle(v("A"), v("B"), v("C"), v("D"), v("M"), v("N"), v("Q"), v("R"), kappa)
        out.update(oracle_p=p, oracle_gain=gain,
                   relative_error=abs(out["gain_estimate"] - gain) / abs(gain) if gain else None)
    return out


def _solve_control(spec: ProblemSpec, numerics: Numerics, T: float):
    return solve_control_problem(spec.lq, spec.x0, spec.initial_regime, numerics, spec.kappa, T, spec.t0,
                                 spec.generator, spec.method)


def _control_outputs(spec, sol, numerics, T, out: Path | None):
    c = spec.lq
    grid = sol.forward.grid
    res = refined_stationarity_residual(c, sol, spec.x0, spec.kappa, numerics, spec.generator,
                                        spec.initial_regime)
    results = {"cost": sol.cost.as_dict(), "kappa_bounds": sol.bounds.as_dict(),
               "converged": sol.fbsde.converged, "final_error": sol.fbsde.final_error,
               "sweeps": len(sol.fbsde.history), "stationarity_residual": res.weighted_norm,
               "median_error_ratio": float(np.median(sol.fbsde.ratios)) if sol.fbsde.ratios.size else None}
    if c.n == 1 and c.m == 1:
        results["riccati"] = riccati_summary(c, spec.kappa, sol.u, sol.X, grid)
    if out is not None:
        states = sol.forward.noise.states
        write_moments_csv(out / "control.csv", sol.u.u, grid, states, "u")
        write_moments_csv(out / "state.csv", sol.X, grid, states, "x")
        write_history_csv(sol.fbsde, out / "iterations.csv")
        fine = grid.refined(4).nodes
        _write_rows(out / "residuals.csv", ["time", "stationarity_residual"],
                    zip(map(float, fine), map(float, res.per_node)))
    return results


def _solve_game(spec: ProblemSpec, numerics: Numerics, T: float, deviations: int):
    return solve_game_fixed_point(spec.game, spec.x0, spec.initial_regime, numerics, spec.mode, spec.kappa, T,
                                  spec.t0, spec.generator, method=spec.method, deviations=deviations)


def _game_outputs(spec, rep, out: Path | None):
    g = rep.X.grid
    state = simulate_game_state(spec.game, rep.u, rep.profile, spec.x0, rep.noise)
    cost = evaluate_game_cost(spec.game, rep.u, state, rep.profile, spec.kappa)
    results = {"cost": cost.as_dict(), "equilibrium": rep.as_dict(),
               "kappa_bounds": compute_game_kappa_bounds(spec.game, spec.kappa, spec.lq.kappa_star).as_dict(),
               "converged": rep.converged, "sweeps": len(rep.fbsde.history)}
    if out is not None:
        states = rep.noise.states
        write_moments_csv(out / "control.csv", rep.u.u, g, states, "u")
        write_moments_csv(out / "state.csv", rep.X.X, g, states, "x")
        write_history_csv(rep.fbsde, out / "iterations.csv")
        dX = np.sqrt(((state.X.mean(axis=2) - rep.profile.X) ** 2).sum(axis=-1).mean(axis=1))
        du = np.sqrt(((rep.u.u.mean(axis=2) - rep.profile.u) ** 2).sum(axis=-1).mean(axis=1))
        _write_rows(out / "residuals.csv", ["time", "state_consistency", "control_consistency"],
                    zip(map(float, g.nodes), map(float, dX), map(float, du)))
        if rep.nash is not None:
            write_deviation_csv(rep.nash, out / "nash.csv")
    return results


def _finish(out: Path, spec: ProblemSpec, results: dict, started: float) -> None:
    _write_json(out / "results.json", {"schema_version": SCHEMA_VERSION, "problem": spec.problem,
                                       "seed": spec.numerics.seed, **results})
    files = {p.name: _sha(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    RunManifest(spec.sha256, __version__, spec.numerics.seed, spec.numerics.threads,
                round(time.perf_counter() - started, 3), files).write(out)


# --------------------------------------------------------------------------
# commands

def cmd_check(spec: ProblemSpec) -> int:
    report = check_report(spec)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_INVALID


def cmd_solve(spec: ProblemSpec, out: Path, force: bool = False) -> int:
    report = check_report(spec)
    if not report["passed"] and not force:
        print(json.dumps(report, indent=2, sort_keys=True), file=sys.stderr)
        return EXIT_INVALID
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    T = horizon(spec)
    try:
        if spec.problem == "control":
            sol = _solve_control(spec, spec.numerics, T)
            results = _control_outputs(spec, sol, spec.numerics, T, out)
        else:
            rep = _solve_game(spec, spec.numerics, T, spec.nash_deviations)
            results = _game_outputs(spec, rep, out)
            if rep.nash is not None:
                results["nash_all_pass"] = rep.nash.all_pass
    except NoConvergence as exc:
        partial = exc.solution
        fb = getattr(partial, "fbsde", partial)
        if fb is not None:
            write_history_csv(fb, out / "iterations.csv")
        _finish(out, spec, {"converged": False, "error": str(exc), "horizon": T}, started)
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except PDViolation as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    results["horizon"] = T
    _finish(out, spec, results, started)
    return EXIT_OK


LADDER_COLUMNS = ["rung", "dt", "particles", "scenarios", "residual", "residual_ratio", "fixed_point_gap",
                  "gain_estimate", "runtime_s"]


def run_ladder(spec: ProblemSpec, ladder) -> list:
    rows = []
    T = horizon(spec)
    prev = None
    for i, (dt, particles, scenarios) in enumerate(ladder):
        nm = replace(spec.numerics, dt=dt, particles=particles, scenarios=scenarios)
        started = time.perf_counter()
        if spec.problem == "control":
            res = _control_outputs(spec, _solve_control(spec, nm, T), nm, T, None)
            resid, gap = res["stationarity_residual"], res["final_error"]
            gain = res.get("riccati", {}).get("gain_estimate")
        else:
            rep = _solve_game(spec, nm, T, 0)
            resid, gap, gain = rep.consistency_gap, rep.fixed_point_gap, None
        ratio = prev / resid if prev is not None and resid > 0 else None
        rows.append([i, dt, particles, scenarios, resid, ratio, gap, gain,
                     round(time.perf_counter() - started, 3)])
        prev = resid
    return rows


def cmd_convergence(spec: ProblemSpec, out: Path, ladder=None) -> int:
    ladder = spec.ladder if ladder is None else ladder
    if not ladder:
        print("empty refinement ladder", file=sys.stderr)
        return EXIT_MALFORMED
    out.mkdir(parents=True, exist_ok=True)
    try:
        rows = run_ladder(spec, ladder)
    except NoConvergence as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    with (out / "ladder.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LADDER_COLUMNS)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in r])
    return EXIT_OK


def parse_ladder(text: str) -> list:
    """``"0.02:256,0.01:1024"`` or ``"0.02:256:8,..."`` into (dt, particles, scenarios) rungs."""
    rungs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise SpecError(f"bad ladder rung {item!r}")
        rungs.append((float(parts[0]), int(parts[1]), int(parts[2]) if len(parts) == 3 else None))
    return rungs


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_MALFORMED)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfswitch", description="Mean-field LQ control and games with regime switching.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("check", "validate a problem document"), ("solve", "solve and write outputs"),
                       ("convergence", "run a refinement ladder")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--spec", required=True, help="problem document (JSON)")
        p.add_argument("--seed-override", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        if name != "check":
            p.add_argument("--out", required=True, help="output directory")
        if name == "solve":
            p.add_argument("--force", action="store_true", help="solve even when checks fail")
        if name == "convergence":
            p.add_argument("--ladder", default=None, help="rungs dt:particles[:scenarios], comma separated")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.spec, args.seed_override)
        if args.threads is not None:
            if args.threads < 1:
                raise SpecError("--threads must be at least 1")
            spec = replace(spec, numerics=replace(spec.numerics, threads=args.threads))
        if args.command == "check":
            return cmd_check(spec)
        if args.command == "solve":
            return cmd_solve(spec, Path(args.out), args.force)
        ladder = None
        if args.ladder is not None:
            ladder = [(dt, n, spec.numerics.scenarios if s is None else s) for dt, n, s in parse_ladder(args.ladder)]
        return cmd_convergence(spec, Path(args.out), ladder)
    except SpecError as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
