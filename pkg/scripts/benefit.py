"""Joint method versus the lora-only and prefix-only ablations over matched seeds.

    python scripts/benefit.py --seeds 100 --out results/benefit.csv
"""

import argparse
import csv
from pathlib import Path

from peml.experiments import benefit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--out", default="results/benefit.csv")
    args = ap.parse_args()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    modes = ("peml", "lora-only", "prefix-only")
    both = pattern = aggregate = 0
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *[f"{m}_{col}" for m in modes for col in ("macro", "pattern", "aggregate")]])
        for seed in range(args.seeds):
            r = benefit_run(seed)
            w.writerow([seed, *[repr(v) for m in modes for v in (r.macro[m], *r.scores[m])]])
            fh.flush()
            both += r.beats("lora-only") and r.beats("prefix-only")
            pattern += r.scores["peml"][0] > r.scores["lora-only"][0]
            aggregate += r.scores["peml"][1] > r.scores["prefix-only"][1]
            print(f"seed {seed}: " + "  ".join(f"{m} {r.macro[m]:.4f}" for m in modes))
    n = args.seeds
    print(f"macro >= both ablations: {both}/{n}")
    print(f"pattern, strictly above lora-only: {pattern}/{n}")
    print(f"aggregate, strictly above prefix-only: {aggregate}/{n}")


if __name__ == "__main__":
    main()
