"""Softmax, Gumbel-softmax and straight-through relaxations over matched seeds.

    python scripts/relaxation.py --seeds 5 --out results/relaxation
"""

import argparse
import json
from pathlib import Path

from peml.diagnostics import relaxation_comparison
from peml.experiments import benefit_preset, pretrained


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--out", default="results/relaxation")
    args = ap.parse_args()

    preset = benefit_preset()
    rep = relaxation_comparison(preset.config(), preset.collection(args.data_seed), pretrained(preset),
                                preset.space, seeds=range(args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.csv").write_text(rep.to_csv())
    (out / "grad_norms.csv").write_text(rep.series_csv())
    (out / "summary.json").write_text(rep.to_json() + "\n")
    for s, row in rep.summary().items():
        print(f"{s:8s} grad norm {row['grad_norm_mean']:.3f} +- {row['grad_norm_std']:.3f}  "
              f"gap {row['loss_gap']:.4f}  val {row['final_val']:.3f}")
    for metric in ("grad_norm_var", "loss_gap"):
        print(f"softmax <= ste on {metric}: {rep.wins('softmax', 'ste', metric)}/{args.seeds}")
    print(json.dumps({"out": str(out)}))


if __name__ == "__main__":
    main()
