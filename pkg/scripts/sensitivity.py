"""Accuracy over prefix-network depth, block repetition and prefix length on the desk suite.

    python scripts/sensitivity.py --layers 2,6 --seeds 5 --out results/sensitivity.csv
"""

import argparse
from pathlib import Path

from peml.diagnostics import sensitivity_sweep
from peml.experiments import pretrained, suite_preset


def ints(text):
    return [int(x) for x in text.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=ints, default=[2, 6])
    ap.add_argument("--reps", type=ints, default=[1])
    ap.add_argument("--prefix-lengths", type=ints, default=[4])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="results/sensitivity.csv")
    args = ap.parse_args()

    preset = suite_preset()
    res = sensitivity_sweep(preset.config(), preset.collection(0), pretrained(preset), args.layers,
                            args.reps, args.prefix_lengths, k=preset.k, seeds=range(args.seeds))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(res.to_csv())
    for key, score in sorted(res.mean_scores().items()):
        print(f"n_layers {key[0]}  repetition {key[1]}  prefix {key[2]}: {score:.4f}")
    if len(args.layers) >= 2:
        lo, hi = min(args.layers), max(args.layers)
        by = {}
        for p in res.points:
            by.setdefault(p.seed, {})[p.n_layers] = p.score
        deeper = sum(v[hi] >= v[lo] for v in by.values() if lo in v and hi in v)
        print(f"n_layers={hi} >= n_layers={lo} in {deeper}/{len(by)} seeds")


if __name__ == "__main__":
    main()
