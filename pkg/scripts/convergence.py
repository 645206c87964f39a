"""Running mean of the squared gradient norm under eta = c / sqrt(T) SGD.

    python scripts/convergence.py --seeds 100 --steps 2000 --out results/convergence.csv
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from peml.experiments import convergence_run
from peml.trainer import convergence_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--early", type=int, default=500, help="checkpoint compared against the final step")
    ap.add_argument("--c", type=float, default=1.0)
    ap.add_argument("--out", default="results/convergence.csv")
    args = ap.parse_args()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wins, lips = 0, []
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", f"running_mean_T{args.early}", f"running_mean_T{args.steps}", "lipschitz_theta_alpha"])
        for seed in range(args.seeds):
            rep = convergence_metrics(convergence_run(seed, args.steps, args.c).history)
            early, late = rep.running_mean[args.early - 1], rep.running_mean[-1]
            wins += late < early
            lips.append(rep.lipschitz)
            w.writerow([seed, repr(float(early)), repr(float(late)), repr(rep.lipschitz)])
            fh.flush()
            print(f"seed {seed}: {early:.4g} -> {late:.4g}  L {rep.lipschitz:.3g}")
    print(f"decreased in {wins}/{args.seeds} seeds; L_theta_alpha median {np.median(lips):.3g}")


if __name__ == "__main__":
    main()
