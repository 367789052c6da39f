#!/usr/bin/env python3
"""Run the 2-operator end-to-end experiment and print the results JSON.

Generates a theme-disjoint dataset (1024/128/128), trains the default
model twice with one seed, and reports loss drop, median test MFCCD vs a
uniform-random baseline, and rerun bit-identity.
"""

import argparse
import json

from synthmatch.config import toy_global_config
from synthmatch.experiments import run_toy_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/toy", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--reuse-dataset", help="existing dataset dir to reuse")
    args = parser.parse_args()

    results = run_toy_experiment(
        args.out, seed=args.seed, cfg=toy_global_config(args.seed),
        reuse_dataset=args.reuse_dataset,
    )
    summary = {k: v for k, v in results.items() if k != "history"}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if all(results["criteria"].values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
