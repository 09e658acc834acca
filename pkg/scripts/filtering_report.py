"""Teacher accuracy on pixels kept by R2CP versus absolute-confidence filtering.

    python3 scripts/filtering_report.py --seeds 1,2,3
"""
import argparse

import numpy as np

from bbdistill.eval import mask_diagnostics
from bbdistill.pipeline.config import default_config
from bbdistill.pipeline.runner import build_datasets
from bbdistill.probmap import hard_argmax
from bbdistill.pseudolabel import ac_mask, compute_class_thresholds, naive_mask, r2cp_mask
from bbdistill.teacher import connect


def pooled(maps, samples, make_mask):
    rows = [mask_diagnostics(make_mask(q), hard_argmax(q), s.labels) for q, s in zip(maps, samples)]
    frac = np.mean([r[0] for r in rows])
    acc = np.average([r[1] for r in rows if r[0] > 0], weights=[r[0] for r in rows if r[0] > 0])
    return frac, acc


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", default="1,2,3")
    args = p.parse_args()
    print(f"{'seed':>4} {'filter':>6} {'kept':>6} {'acc':>7}")
    for seed in map(int, args.seeds.split(",")):
        cfg = default_config(seed)
        train, _ = build_datasets(cfg)
        teacher = connect(cfg.teacher, cfg.domain.source)
        maps = [teacher.predict(s.features) for s in train]
        rc, ac = compute_class_thresholds(maps, "rc"), compute_class_thresholds(maps, "ac")
        for name, fn in (("none", naive_mask), ("r2cp", lambda q: r2cp_mask(q, rc)), ("ac", lambda q: ac_mask(q, ac))):
            frac, acc = pooled(maps, train, fn)
            print(f"{seed:>4} {name:>6} {frac:6.3f} {acc:7.4f}")


if __name__ == "__main__":
    main()
