"""Bidirectional flow: tagged and ordinary crowds crossing, with a spike-variation check.

    python3 scripts/bidirectional_flow.py --out runs/bidir
"""

import argparse
from pathlib import Path

import numpy as np

from tagged_mftg.cli import write_artifacts
from tagged_mftg.core import path_mean
from tagged_mftg.game import spike_variation_check
from tagged_mftg.lsmc import solve_equilibrium
from tagged_mftg.scenarios import builtin


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", nargs="+", default=["bidir", "twist"])
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=200, help="spike trials per crowd (0 skips the check)")
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()

    for name in args.scenarios:
        spec = builtin(name).with_overrides({"solver.paths": args.paths, "solver.seed": args.seed})
        res = solve_equilibrium(spec, verbose=True)
        ens, od = res.ensemble, spec.ordinary
        my, mx = path_mean(ens.Y, axis=1), path_mean(ens.X, axis=1)
        miss = np.mean(np.linalg.norm(ens.X[-1] - np.asarray(od.xT), axis=-1))
        print(f"\n{name}: converged {res.converged} after {res.diagnostics['iterations']} iterations")
        print(f"  tagged mean path   {my[0]} -> {my[-1]}")
        print(f"  ordinary mean path {mx[0]} -> {mx[-1]}")
        print(f"  E|X_T - x_T| = {miss:.4f}")
        step = max(1, (len(my) - 1) // 5)
        for k in range(0, len(my), step):
            print(f"    t={ens.grid.times[k]:.2f}  Y {my[k].round(3)}  X {mx[k].round(3)}")
        if args.trials:
            for crowd in ("tagged", "ordinary"):
                rep = spike_variation_check(res, trials=args.trials, crowds=(crowd,))
                print(f"  spike check ({crowd}): {rep.failures}/{args.trials} trials below -3 SE")
        if args.out:
            write_artifacts(res, args.out / name)


if __name__ == "__main__":
    main()
