"""Desired-velocity experiment: speed tracking and the effect of the repulsion point.

    python3 scripts/desired_velocity.py --refine
"""

import argparse
from pathlib import Path

import numpy as np

from tagged_mftg.cli import solve, speed_profile, write_artifacts
from tagged_mftg.core import path_mean
from tagged_mftg.lq import arctan_profile
from tagged_mftg.scenarios import builtin


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--solver", choices=("lsmc", "lq", "auto"), default="lq")
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--refine", action="store_true", help="compare solvers on dv_set1 over finer grids")
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    over = {"solver.paths": args.paths, "solver.seed": args.seed}

    print("speed tracking of max{0.1, arctan(pi t - 1.6)}")
    for name in ("dv_set3", "dv_set4"):
        res = solve(builtin(name).with_overrides(over), args.solver)
        grid = res.ensemble.grid
        gap = speed_profile(res.ensemble) - arctan_profile(grid.times[:-1])
        l2 = np.sqrt(np.sum(gap ** 2) * grid.dt)
        print(f"  {name} (des = {res.spec.tagged.des:g}): L2 gap {l2:.4f}, final speed "
              f"{speed_profile(res.ensemble)[-1]:.4f} vs {arctan_profile(grid.times[-2]):.4f}")
        if args.out:
            write_artifacts(res, args.out / name)

    print("\nrepulsion point Q and where the group starts")
    for name in ("dv_set1", "dv_set2"):
        res = solve(builtin(name).with_overrides(over), args.solver)
        Y = res.ensemble.Y
        print(f"  {name} (Q = {res.spec.tagged.q}): mean Y0 {path_mean(Y[0])}, "
              f"mean Y at T/2 {path_mean(Y[Y.shape[0] // 2])}")
        if args.out:
            write_artifacts(res, args.out / name)

    if args.refine:
        print("\ndv_set1 mean Y0, first coordinate, lsmc vs lq as dt shrinks")
        for steps in (100, 200, 400):
            spec = builtin("dv_set1").with_overrides({**over, "solver.steps": steps, "solver.paths": 4000})
            a = path_mean(solve(spec, "lsmc").ensemble.Y[0])[0]
            b = path_mean(solve(spec, "lq").ensemble.Y[0])[0]
            print(f"  M = {steps:4d}: lsmc {a:.4f}, lq {b:.4f}, gap {a - b:+.4f}")


if __name__ == "__main__":
    main()
