"""Keep-together experiment: distance to the group mean with and without attraction.

    python3 scripts/keep_together.py --out runs/keep_together
"""

import argparse
from pathlib import Path

import numpy as np

from tagged_mftg.cli import solve, write_artifacts
from tagged_mftg.core import distance_to_mean_series, path_mean
from tagged_mftg.lq import keep_together_oracle_for
from tagged_mftg.scenarios import builtin


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--solver", choices=("lsmc", "lq", "auto"), default="lsmc")
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="write run artifacts under this directory")
    args = ap.parse_args()

    over = {"solver.paths": args.paths, "solver.steps": args.steps, "solver.seed": args.seed}
    quiet = builtin("kt_set1").with_overrides({**over, "tagged.noise": 0.0, "tagged.y0.std": 0.0})
    target = keep_together_oracle_for(quiet.with_overrides({"tagged.attr": 0.0})).Y0
    start = path_mean(solve(quiet, args.solver).ensemble.Y[0])
    print(f"noise-free start {start} vs oracle {target}")

    series = {}
    for name in ("kt_set1", "kt_set2"):
        res = solve(builtin(name).with_overrides(over), args.solver)
        series[name] = distance_to_mean_series(res.ensemble)
        print(f"{name}: solver {res.solver}, converged {res.converged}, "
              f"iterations {res.diagnostics.get('iterations', '-')}, mean Y0 {path_mean(res.ensemble.Y[0])}")
        if args.out:
            write_artifacts(res, args.out / name)
    t = np.linspace(0.0, 1.0, args.steps + 1)
    print("\n   t   with attraction   without")
    for k in range(0, args.steps + 1, max(1, args.steps // 10)):
        print(f"{t[k]:5.2f}   {series['kt_set1'][k]:15.4f}   {series['kt_set2'][k]:7.4f}")


if __name__ == "__main__":
    main()
