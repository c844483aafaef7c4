"""Baseline vs StyleLess on clean and corrupted toy scenes.

    python3 scripts/table1_trend.py --seeds 1,2,3,4,5 --out runs/table1
"""

import argparse

from styleless.evalkit import WEATHER, ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--out", default="runs/table1")
    ap.add_argument("--n-train", type=int, default=ExperimentConfig.n_train)
    ap.add_argument("--epochs", type=int, default=ExperimentConfig.epochs)
    ap.add_argument("--alpha", type=float, default=0.1)
    a = ap.parse_args()
    cfg = ExperimentConfig(n_train=a.n_train, epochs=a.epochs, alpha=a.alpha)
    res = run_experiment("baseline-vs-styleless", [int(s) for s in a.seeds.split(",")], cfg, out=a.out)

    weather = [f"test/{t}" for t in WEATHER]
    print(f"\n{'dataset':16s} {'baseline':>9s} {'styleless':>9s} {'diff':>7s}")
    for d in res.medians["baseline"]:
        b, s = res.medians["baseline"][d], res.medians["styleless"][d]
        print(f"{d:16s} {b:9.2f} {s:9.2f} {s - b:+7.2f}")
    for name, sets in (("haze/rain 3-5", weather), ("clean", ["test/clean"])):
        b, s = res.seed_median("baseline", sets), res.seed_median("styleless", sets)
        print(f"{name}: baseline {b:.2f}, styleless {s:.2f} ({s - b:+.2f})")
    print(f"table: {a.out}/baseline-vs-styleless_table.csv")


if __name__ == "__main__":
    main()
