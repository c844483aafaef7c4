"""Training-free Gram filters on a stage-1 model.

Each filter's P (and tau for the noise filter) is picked on corrupted
validation scenes, then evaluated on the test suite.

    python3 scripts/filters_ablation.py --seeds 1,2,3 --out runs/filters
"""

import argparse

from styleless.evalkit import ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--out", default="runs/filters")
    ap.add_argument("--layers", default="0", help="comma-separated tap indices the filters act on")
    a = ap.parse_args()
    cfg = ExperimentConfig(filter_layers=tuple(int(v) for v in a.layers.split(",")))
    seeds = [int(s) for s in a.seeds.split(",")]
    res = run_experiment("filters-ablation", seeds, cfg, out=a.out)

    corrupted = [d for d in res.medians["baseline"] if d != "test/clean"]
    for model in res.medians:
        print(f"{model:17s} clean {res.seed_median(model, ['test/clean']):6.2f}   "
              f"corrupted {res.seed_median(model, corrupted):6.2f}   "
              f"haze-4 {res.seed_median(model, ['test/haze-4']):6.2f}")
    for seed, choice in res.filter_choice.items():
        print(f"seed {seed}: " + ", ".join(f"{k} p={c.p} tau={c.tau}" for k, c in choice.items()))


if __name__ == "__main__":
    main()
