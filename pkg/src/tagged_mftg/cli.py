"""Command-line front end.

    tagged-mftg run --scenario bidir --out runs/bidir
    tagged-mftg verify spike --scenario twist
    tagged-mftg list-scenarios
    tagged-mftg export-spec --scenario kt_set1 --set tagged.attr=10

Exit codes: 0 success, 2 invalid input, 3 no convergence or failed
verification, 4 file-system trouble.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    Ensemble,
    InvalidArgument,
    SolveResult,
    distance_to_mean_series,
    make_grid,
    path_mean,
    sample_brownian,
)
from .game import spike_variation_check
from .lq import (
    UnsupportedScenario,
    integrate_matching,
    keep_together_oracle_for,
    lq_coefficients,
    solve_lq,
)
from .lsmc import RegressionBasis, backward_lsmc, solve_equilibrium
from .scenarios import (
    ScenarioError,
    ScenarioSpec,
    builtin,
    list_scenarios,
    parse_override,
    parse_scenario,
    serialize_scenario,
)

EXIT_OK, EXIT_INVALID, EXIT_FAILED, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# artifacts


def speed_profile(ens: Ensemble, which: str = "tagged") -> np.ndarray:
    """Mean speed ||u|| on each interval [t_k, t_{k+1}); length M."""
    U = ens.Uy if which == "tagged" else ens.Ux
    if U is None:
        raise InvalidArgument(f"no controls for the {which} crowd")
    return path_mean(np.linalg.norm(U[:-1], axis=-1), axis=1)


def snapshot_steps(M: int, count: int = 5) -> list[int]:
    return sorted({int(round(i * M / (count - 1))) for i in range(count)}) if count > 1 else [M]


def bounding_box(clouds: Sequence[np.ndarray], pad: float = 0.1) -> tuple[float, float, float, float]:
    pts = np.concatenate([c[:, :2] for c in clouds])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo, hi = lo - pad * span, hi + pad * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def density_grid(points: np.ndarray, box, bins: int = 50) -> np.ndarray:
    """2-D histogram counts of the first two coordinates; rows follow the first axis."""
    x0, x1, y0, y1 = box
    counts, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins, range=[[x0, x1], [y0, y1]])
    return counts.astype(np.int64)


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows: np.ndarray, int_cols: int = 0) -> None:
    fmt = ["%d"] * int_cols + ["%.17g"] * (rows.shape[1] - int_cols)
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=",".join(header), comments="")


@dataclass(frozen=True)
class RunArtifacts:
    out_dir: Path
    files: tuple[str, ...]
    converged: bool


def write_artifacts(result: SolveResult, out_dir: Path, max_paths: Optional[int] = 200,
                    snapshots: int = 5, bins: int = 50, extra: Optional[dict] = None) -> RunArtifacts:
    ens = result.ensemble
    grid = ens.grid
    M, t = grid.steps, grid.times
    N, d = ens.n_paths, ens.dim
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []

    # paths table
    keep = N if max_paths is None else min(N, max_paths)
    cols = ["t", "path"] + [f"y{j + 1}" for j in range(d)]
    blocks = [ens.Y[:, :keep]]
    if ens.X is not None:
        cols += [f"x{j + 1}" for j in range(d)]
        blocks.append(ens.X[:, :keep])
    cols += [f"uy{j + 1}" for j in range(d)]
    blocks.append(ens.Uy[:, :keep])
    if ens.Ux is not None:
        cols += [f"ux{j + 1}" for j in range(d)]
        blocks.append(ens.Ux[:, :keep])
    data = np.concatenate(blocks, axis=-1).reshape((M + 1) * keep, -1)
    tt = np.repeat(t, keep)[:, None]
    pid = np.tile(np.arange(keep), M + 1)[:, None]
    rows = np.concatenate([pid, tt, data], axis=1)
    # path id first for the integer format, then swap back into the header order
    _write_csv(out_dir / "paths.csv", ["path", "t"] + cols[2:], rows, int_cols=1)
    files.append("paths.csv")

    # series with M+1 rows; the speed in the last row uses the control held at T
    header = ["t"] + [f"mean_y{j + 1}" for j in range(d)] + ["dist_to_mean_tagged", "speed_tagged"]
    parts = [t[:, None], path_mean(ens.Y, axis=1), distance_to_mean_series(ens, "tagged")[:, None],
             path_mean(np.linalg.norm(ens.Uy, axis=-1), axis=1)[:, None]]
    if ens.X is not None:
        header += [f"mean_x{j + 1}" for j in range(d)] + ["dist_to_mean_ordinary", "speed_ordinary"]
        parts += [path_mean(ens.X, axis=1), distance_to_mean_series(ens, "ordinary")[:, None],
                  path_mean(np.linalg.norm(ens.Ux, axis=-1), axis=1)[:, None]]
    _write_csv(out_dir / "series.csv", header, np.concatenate(parts, axis=1))
    files.append("series.csv")

    # speed on the M control intervals
    header = ["t", "speed_tagged"]
    parts = [t[:-1, None], speed_profile(ens, "tagged")[:, None]]
    if ens.Ux is not None:
        header.append("speed_ordinary")
        parts.append(speed_profile(ens, "ordinary")[:, None])
    _write_csv(out_dir / "speed.csv", header, np.concatenate(parts, axis=1))
    files.append("speed.csv")

    # densities
    if d >= 2:
        steps = snapshot_steps(M, snapshots)
        crowds = [("tagged", ens.Y)] + ([("ordinary", ens.X)] if ens.X is not None else [])
        box = bounding_box([pos[k] for _, pos in crowds for k in steps])
        ddir = out_dir / "density"
        ddir.mkdir(exist_ok=True)
        for name, pos in crowds:
            for k in steps:
                counts = density_grid(pos[k], box, bins)
                fname = f"density/{name}_k{k:05d}.txt"
                head = (f"# crowd={name} step={k} t={float(t[k])!r} bins={bins}x{bins} "
                        f"box={box[0]!r},{box[1]!r},{box[2]!r},{box[3]!r} total={int(counts.sum())}\n")
                body = "\n".join(" ".join(str(v) for v in row) for row in counts)
                (out_dir / fname).write_text(head + body + "\n", encoding="utf-8")
                files.append(fname)

    _write_json(out_dir / "diagnostics.json", result.diagnostics)
    files.append("diagnostics.json")
    meta = {
        "solver": result.solver,
        "seed": result.bundle.seed,
        "paths": N,
        "steps": M,
        "converged": result.converged,
        "scenario": serialize_scenario(result.spec),
    }
    if extra:
        meta.update(extra)
    _write_json(out_dir / "metadata.json", meta)
    (out_dir / "scenario.scn").write_text(serialize_scenario(result.spec), encoding="utf-8")
    files += ["metadata.json", "scenario.scn"]
    return RunArtifacts(out_dir, tuple(files), result.converged)


# ---------------------------------------------------------------------------
# solving


def lq_applicable(spec: ScenarioSpec) -> bool:
    try:
        lq_coefficients(spec)
    except UnsupportedScenario:
        return False
    return True


def solve(spec: ScenarioSpec, solver: str = "auto", workers: Optional[int] = None) -> SolveResult:
    if solver == "auto":
        solver = "lq" if lq_applicable(spec) else "lsmc"
    if solver == "lq":
        return solve_lq(spec, workers=workers)
    if solver == "lsmc":
        return solve_equilibrium(spec, workers=workers)
    raise InvalidArgument(f"unknown solver {solver!r}")


def resolve_spec(scenario: Optional[str], file: Optional[str], overrides: Sequence[str] = (),
                 seed: Optional[int] = None, paths: Optional[int] = None,
                 steps: Optional[int] = None) -> ScenarioSpec:
    if (scenario is None) == (file is None):
        raise ScenarioError("give exactly one of --scenario or --file")
    if file is not None:
        spec = parse_scenario(Path(file).read_text(encoding="utf-8"))
    else:
        spec = builtin(scenario)
    items = dict(parse_override(s) for s in overrides)
    if seed is not None:
        items["solver.seed"] = seed
    if paths is not None:
        items["solver.paths"] = paths
    if steps is not None:
        items["solver.steps"] = steps
    return spec.with_overrides(items) if items else spec


# ---------------------------------------------------------------------------
# verification suites


def verify_oracles(spec: ScenarioSpec, tol: float = 0.02, workers: Optional[int] = None) -> dict:
    """LSMC against the closed-form solver on the same paths."""
    checks = []
    if not lq_applicable(spec):
        raise UnsupportedScenario(f"scenario {spec.name or spec.kind!r} has no closed-form counterpart")
    a = solve_equilibrium(spec, workers=workers)
    b = solve_lq(spec, workers=workers)
    ea, eb = a.ensemble, b.ensemble
    mean_gap = float(np.max(np.abs(path_mean(ea.Y, axis=1) - path_mean(eb.Y, axis=1))))
    dtm_gap = float(np.max(np.abs(distance_to_mean_series(ea) - distance_to_mean_series(eb))))
    checks.append({"name": "lsmc converged", "value": a.diagnostics["iterations"], "passed": a.converged})
    checks.append({"name": "mean path gap", "value": mean_gap, "limit": tol, "passed": mean_gap <= tol})
    checks.append({"name": "distance-to-mean gap", "value": dtm_gap, "limit": tol, "passed": dtm_gap <= tol})

    tg = spec.tagged
    if tg.rep == 0 and tg.attr == 0:
        coeffs = lq_coefficients(spec)
        grid = make_grid(spec.horizon, spec.solver.steps)
        sol = integrate_matching(coeffs, grid)
        t, T = grid.times, spec.horizon
        g_err = float(np.max(np.abs(sol.gamma - (t - T) / (tg.cont + tg.des))))
        e_err = float(np.max(np.abs(sol.eta - tg.noise * (t - T))))
        checks.append({"name": "matching closed form", "value": max(g_err, e_err), "limit": 1e-8,
                       "passed": max(g_err, e_err) <= 1e-8})

    if spec.kind == "keep_together":
        quiet = spec.with_overrides({"tagged.noise": 0.0, "tagged.attr": 0.0, "tagged.y0.std": 0.0})
        target = keep_together_oracle_for(quiet).Y0
        for name, fn in (("lsmc", solve_equilibrium), ("lq", solve_lq)):
            y0 = path_mean(fn(quiet, workers=workers).ensemble.Y[0])
            rel = float(np.max(np.abs(y0 - target) / np.abs(target)))
            checks.append({"name": f"deterministic start ({name})", "value": rel, "limit": 0.01,
                           "passed": rel <= 0.01})
    return {"suite": "oracles", "scenario": spec.name, "checks": checks,
            "passed": all(c["passed"] for c in checks)}


def verify_spike(spec: ScenarioSpec, trials: int = 200, eps: float = 0.1, seed: int = 0,
                 offset: float = 1.0, workers: Optional[int] = None) -> dict:
    """Spike variations around the solved candidate and around a detuned one."""
    res = solve(spec, "lsmc" if spec.ordinary is not None else "auto", workers)
    crowds = ("tagged", "ordinary") if spec.ordinary is not None else ("tagged",)
    checks = [{"name": "solver converged", "value": res.diagnostics.get("iterations", 0),
               "passed": bool(res.converged)}]
    reports = {}
    for crowd in crowds:
        rep = spike_variation_check(res, trials=trials, eps=eps, seed=seed, crowds=(crowd,))
        worst = rep.worst()
        reports[crowd] = rep.as_dict()
        checks.append({"name": f"candidate ({crowd})", "failures": rep.failures,
                       "worst_delta": worst.delta, "worst_se": worst.se, "passed": rep.passed})
        off = [offset] * spec.dim
        bad = spike_variation_check(res, trials=trials, eps=eps, seed=seed, crowds=(crowd,),
                                    offset=off, offset_crowd=crowd)
        reports[f"{crowd}_detuned"] = bad.as_dict()
        checks.append({"name": f"detuned ({crowd}) is rejected", "failures": bad.failures,
                       "passed": not bad.passed})
    return {"suite": "spike", "scenario": spec.name, "checks": checks, "reports": reports,
            "passed": all(c["passed"] for c in checks)}


def martingale_errors(n_paths: int = 10_000, levels: Sequence[int] = (100, 200, 400), seed: int = 0,
                      degree: int = 2, workers: Optional[int] = None, refine: int = 2) -> list[dict]:
    """Solve Y_T = B_T on nested grids and measure the error against a finer path.

    The L2 error compares the piecewise-constant Y with B on a reference grid
    ``refine`` times finer than the finest level, so it shrinks like sqrt(dt);
    grid-point errors and mean |Z - 1| are reported alongside.
    """
    fine_M = max(levels) * refine
    fine = sample_brownian(make_grid(1.0, fine_M), n_paths, (0, 1), seed, workers)
    Bf = fine.By
    out = []
    for M in levels:
        bundle = fine.coarsen(fine_M // M)
        B = bundle.By
        sol = backward_lsmc(B[-1], None, RegressionBasis("polynomial", degree, ("b",)), B,
                            bundle, bundle.grid, workers=workers)
        r = fine_M // M
        Yfine = np.repeat(sol.Y[:-1], r, axis=0)
        cont = float(np.sqrt(np.mean((Yfine - Bf[:-1]) ** 2)))
        grid_err = float(np.max(np.sqrt(np.mean((sol.Y - B) ** 2, axis=(1, 2)))))
        z_err = float(np.mean(np.abs(sol.Z[:-1] - 1.0)))
        out.append({"steps": M, "error": cont, "grid_error": grid_err, "z_error": z_err})
    return out


def verify_convergence(n_paths: int = 10_000, seed: int = 0, workers: Optional[int] = None) -> dict:
    rows = martingale_errors(n_paths, seed=seed, workers=workers)
    errs = [r["error"] for r in rows]
    checks = [{"name": "error decreases with dt", "value": errs,
               "passed": all(b < a for a, b in zip(errs, errs[1:]))}]
    first = rows[0]
    checks.append({"name": "grid error at M=100", "value": first["grid_error"], "limit": 0.05,
                   "passed": first["grid_error"] <= 0.05})
    checks.append({"name": "mean |Z - 1| at M=100", "value": first["z_error"], "limit": 0.05,
                   "passed": first["z_error"] <= 0.05})
    return {"suite": "convergence", "levels": rows, "checks": checks,
            "passed": all(c["passed"] for c in checks)}


# ---------------------------------------------------------------------------
# argument handling


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", help="built-in scenario name")
    p.add_argument("--file", help="scenario file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one field (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int, help="worker threads (default from TAGGED_MFTG_WORKERS or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tagged-mftg", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="solve a scenario and write artifacts")
    _add_scenario_args(run)
    run.add_argument("--solver", choices=("lsmc", "lq", "auto"), default="auto")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--max-paths", type=int, default=200, help="paths kept in paths.csv (0 = all)")
    run.add_argument("--snapshots", type=int, default=5)
    run.add_argument("--bins", type=int, default=50)

    ver = sub.add_parser("verify", help="run a verification suite")
    ver.add_argument("suite", choices=("oracles", "spike", "convergence"))
    _add_scenario_args(ver)
    ver.add_argument("--trials", type=int, default=200)
    ver.add_argument("--tol", type=float, default=0.02, help="oracle agreement tolerance")
    ver.add_argument("--out", help="write the JSON report here")

    sub.add_parser("list-scenarios", help="print built-in scenario names")

    exp = sub.add_parser("export-spec", help="print a resolved scenario file")
    _add_scenario_args(exp)
    exp.add_argument("--out", help="write to this file instead of stdout")
    return ap


def _emit(report: dict, out: Optional[str]) -> None:
    text = json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(json.dumps(_clean({k: v for k, v in report.items() if k != "reports"}),
                                indent=2, sort_keys=True) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "list-scenarios":
            for name in list_scenarios():
                spec = builtin(name)
                print(f"{name}\t{spec.kind}\tT={spec.horizon:g}")
            return EXIT_OK

        if args.verb == "verify" and args.suite == "convergence":
            report = verify_convergence(args.paths or 10_000, args.seed or 0, args.workers)
            _emit(report, args.out)
            return EXIT_OK if report["passed"] else EXIT_FAILED

        default = {"oracles": "kt_set2", "spike": "bidir"}.get(getattr(args, "suite", ""), None)
        scenario = args.scenario if (args.scenario or args.file) else default
        spec = resolve_spec(scenario, args.file, args.overrides, args.seed, args.paths, args.steps)

        if args.verb == "export-spec":
            text = serialize_scenario(spec)
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return EXIT_OK

        if args.verb == "verify":
            if args.suite == "oracles":
                report = verify_oracles(spec, args.tol, args.workers)
            else:
                report = verify_spike(spec, args.trials, seed=spec.solver.seed, workers=args.workers)
            _emit(report, args.out)
            return EXIT_OK if report["passed"] else EXIT_FAILED

        result = solve(spec, args.solver, args.workers)
        arts = write_artifacts(result, Path(args.out), args.max_paths or None, args.snapshots, args.bins)
        print(f"wrote {len(arts.files)} files to {arts.out_dir} "
              f"({result.solver}, converged={result.converged})")
        return EXIT_OK if result.converged else EXIT_FAILED
    except (ScenarioError, InvalidArgument, UnsupportedScenario) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
