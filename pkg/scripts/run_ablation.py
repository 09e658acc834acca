"""Reproduce the variant comparison on the default benchmark.

    python3 scripts/run_ablation.py --seeds 1,2,3 --out ablation.csv
"""
import argparse
import logging
import time

from bbdistill.pipeline.ablation import run_ablation
from bbdistill.pipeline.config import VARIANTS, default_config


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--variants", default="naive,r2cp,r2cp+consistency,corte-full",
                   help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--out", help="write the table as CSV")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    seeds = [int(s) for s in args.seeds.split(",")]
    base = default_config(seeds[0], output_dir="runs/ablation")
    if args.steps:
        base = base.with_variant(base.variant, total_steps=args.steps)
    start = time.perf_counter()
    table = run_ablation(base, args.variants.split(","), seeds)
    print(table.render())
    print(f"\n{len(seeds)} seeds, {time.perf_counter() - start:.0f}s")
    if args.out:
        with open(args.out, "w") as f:
            f.write(table.to_csv())


if __name__ == "__main__":
    main()
