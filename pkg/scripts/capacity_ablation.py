"""Backbone vs backbone+StyleLess vs a widened backbone of matched size.

The widened net gets the StyleLess model's total parameter count and the
same number of optimizer steps (stage 1 + stage 2 epochs).

    python3 scripts/capacity_ablation.py --seeds 1,2,3 --out runs/capacity
"""

import argparse

from styleless.evalkit import SEVERE, ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--out", default="runs/capacity")
    a = ap.parse_args()
    res = run_experiment("capacity-ablation", [int(s) for s in a.seeds.split(",")], ExperimentConfig(), out=a.out)
    severe = [f"test/{t}" for t in SEVERE]
    for model in ("baseline", "styleless", "widened"):
        cells = "  ".join(f"{d.split('/')[1]} {res.medians[model][d]:5.1f}" for d in severe)
        print(f"{model:10s} clean {res.medians[model]['test/clean']:5.1f}  {cells}  "
              f"| mean sev-5 {res.seed_median(model, severe):5.2f}")


if __name__ == "__main__":
    main()
