#!/usr/bin/env python3
"""Train the ablation variants on one shared dataset and print the table.

Variants: full model, dilated filters off, label smoothing off,
importance weighting off; plus a uniform-random-preset reference row.
Writes ablations.md / ablations.csv / ablations.json into --out.
"""

import argparse

from synthmatch.config import ablation_global_config, toy_global_config
from synthmatch.experiments import run_ablations


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/ablations")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--full", action="store_true",
                        help="full toy-scale dataset instead of the reduced one")
    args = parser.parse_args()

    cfg = toy_global_config(args.seed) if args.full else ablation_global_config(args.seed)
    rows = run_ablations(args.out, seed=args.seed, cfg=cfg)
    width = max(len(r["method"]) for r in rows)
    print(f"{'Method'.ljust(width)}  MFCCD")
    for row in rows:
        print(f"{row['method'].ljust(width)}  {row['mfccd']:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
