"""Run the seeded method comparison and print the summary tables.

    python scripts/run_experiments.py                    # every method, seeds 0-4
    python scripts/run_experiments.py --methods tpo stepdpo --seeds 0 1

Per-seed metrics are also written as CSV under --out (default: experiments/).
"""

import argparse
import csv
import logging
from pathlib import Path

from trajpref.experiments import METHODS, SEEDS, Lab, generalization_mean, seed_mean


def write_rows(lab: Lab, methods, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "iteration", "suite", "success_rate", "grasp_rate", "collision_rate",
                    "step_length", "seconds"])
        for m in methods:
            for res in lab.all_seeds(m):
                for r in res.baseline + res.history:
                    w.writerow([m, res.seed, r.iteration, r.suite, r.success_rate, r.grasp_rate,
                                r.collision_rate, r.step_length, round(res.seconds, 1)])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", nargs="+", default=list(METHODS), choices=list(METHODS))
    ap.add_argument("--seeds", nargs="+", type=int, default=list(SEEDS))
    ap.add_argument("--out", default="experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    lab = Lab(seeds=tuple(args.seeds))
    first = lab.all_seeds(args.methods[0])
    print(f"seeds {list(lab.seeds)}")
    print(f"{'method':<12}{'in-domain SR':>14}{'general. SR':>13}{'mean SR':>10}{'in-dom CR':>11}{'in-dom SL':>11}")
    print(f"{'sft':<12}{seed_mean(first, 'success_rate', 'in_domain', start=True):>14.3f}"
          f"{generalization_mean(first, start=True):>13.3f}{seed_mean(first, 'success_rate', start=True):>10.3f}"
          f"{seed_mean(first, 'collision_rate', 'in_domain', start=True):>11.3f}"
          f"{seed_mean(first, 'step_length', 'in_domain', start=True):>11.2f}")
    for m in args.methods:
        res = lab.all_seeds(m)
        print(f"{m:<12}{seed_mean(res, 'success_rate', 'in_domain'):>14.3f}{generalization_mean(res):>13.3f}"
              f"{seed_mean(res, 'success_rate'):>10.3f}{seed_mean(res, 'collision_rate', 'in_domain'):>11.3f}"
              f"{seed_mean(res, 'step_length', 'in_domain'):>11.2f}")
    write_rows(lab, args.methods, Path(args.out) / "per_seed.csv")
    print(f"per-seed rows: {Path(args.out) / 'per_seed.csv'}")


if __name__ == "__main__":
    main()
