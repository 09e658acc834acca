"""Run a list of variants under shared seeds and tabulate final test mIoU."""
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .config import VARIANTS, default_config
from .runner import build_datasets, run_experiment

log = logging.getLogger(__name__)

# Row order of the comparison table, simplest supervision first.
TABLE_ORDER = ("naive", "kl-div", "ac-filter", "r2cp", "r2cp+consistency", "corte-full")


@dataclass(frozen=True)
class AblationRow:
    variant: str
    seeds: tuple
    mious: tuple

    @property
    def mean(self):
        return float(np.mean(self.mious))

    @property
    def std(self):
        return float(np.std(self.mious))


@dataclass(frozen=True)
class AblationTable:
    rows: tuple

    def __getitem__(self, variant):
        for row in self.rows:
            if row.variant == variant:
                return row
        raise KeyError(variant)

    def means(self):
        return {r.variant: r.mean for r in self.rows}

    def to_csv(self):
        seeds = self.rows[0].seeds if self.rows else ()
        lines = [",".join(["variant", "mean_miou", "std_miou"] + [f"seed_{s}" for s in seeds])]
        for r in self.rows:
            lines.append(",".join([r.variant, f"{r.mean:.6f}", f"{r.std:.6f}"] + [f"{m:.6f}" for m in r.mious]))
        return "\n".join(lines) + "\n"

    def render(self):
        base = self.rows[0].mean if self.rows else 0.0
        out = [f"{'variant':<18} {'mIoU':>7} {'+/-':>6} {'delta':>7}"]
        for r in self.rows:
            out.append(f"{r.variant:<18} {100 * r.mean:7.2f} {100 * r.std:6.2f} {100 * (r.mean - base):+7.2f}")
        return "\n".join(out)


def run_ablation(base, variants, seeds=None, write_outputs=False):
    """Run each variant for each seed; datasets are generated once per seed and shared.

    ``seeds`` defaults to the base config's own seed. With several seeds, the
    source domain is re-seeded alongside the run so every seed is a fresh
    benchmark draw.
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}")
    ordered = sorted(dict.fromkeys(variants), key=TABLE_ORDER.index)
    seeds = tuple(seeds) if seeds else (base.seed,)
    results = {v: [] for v in ordered}
    for seed in seeds:
        config = base if seed == base.seed else _reseed(base, seed)
        datasets = build_datasets(config)
        for variant in ordered:
            out = os.path.join(base.output_dir, f"{variant}-seed{seed}")
            run = config.with_variant(variant, output_dir=out)
            record = run_experiment(run, datasets=datasets, write_outputs=write_outputs)
            log.info("ablation seed=%d %s mIoU %.4f", seed, variant, record.final_miou)
            results[variant].append(record.final_miou)
    return AblationTable(tuple(AblationRow(v, seeds, tuple(results[v])) for v in ordered))


def _reseed(base, seed):
    source = replace(base.domain.source, seed=seed)
    return replace(base, seed=seed, domain=replace(base.domain, source=source))


def default_ablation(seeds=(1, 2, 3), variants=("naive", "r2cp", "r2cp+consistency", "corte-full"), **changes):
    return run_ablation(replace(default_config(seeds[0]), **changes), variants, seeds)
