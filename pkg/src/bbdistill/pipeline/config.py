"""Declarative experiment configuration, JSON round-trip and hashing."""
import json
from dataclasses import dataclass, field, replace

import numpy as np

from ..domain import DEFAULT_STDDEV_SCALE, DomainSpec, default_shift, default_source_spec, make_shifted_domain
from ..seeding import canonical_json, config_digest, derive_seed
from ..student.augment import AugmentSpec
from ..teacher import EndpointDescriptor

VARIANTS = ("naive", "kl-div", "ac-filter", "r2cp", "r2cp+consistency", "corte-full")

# Variant -> (filter statistic or None, strong augmentation, EMA refinement)
VARIANT_PARTS = {
    "naive": (None, False, False),
    "kl-div": (None, False, False),
    "ac-filter": ("ac", False, False),
    "r2cp": ("rc", False, False),
    "r2cp+consistency": ("rc", True, False),
    "corte-full": ("rc", True, True),
}

SUBSEED_NAMES = ("init", "augment", "batching")


@dataclass(frozen=True)
class DomainConfig:
    source: DomainSpec = field(default_factory=default_source_spec)
    shift: tuple = None
    stddev_scale: float = DEFAULT_STDDEV_SCALE
    n_train: int = 200
    n_test: int = 100
    n_source: int = 50
    height: int = 32
    width: int = 32

    def __post_init__(self):
        shift = default_shift(self.source) if self.shift is None else np.asarray(self.shift, dtype=np.float64)
        if shift.shape != self.source.means.shape:
            raise ValueError(f"shift must be {self.source.means.shape}, got {shift.shape}")
        object.__setattr__(self, "shift", tuple(tuple(float(x) for x in row) for row in shift))
        if min(self.n_train, self.n_test) < 1 or self.n_source < 0:
            raise ValueError("dataset sizes must be positive")

    def target_spec(self):
        return make_shifted_domain(self.source, self.shift, self.stddev_scale)

    def to_dict(self):
        return {
            "source": self.source.to_dict(),
            "shift": [list(r) for r in self.shift],
            "stddev_scale": self.stddev_scale,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_source": self.n_source,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["source"] = DomainSpec.from_dict(d["source"])
        return cls(**d)


@dataclass(frozen=True)
class OptimConfig:
    lr_hidden: float = 2e-4
    lr_output: float = 2e-3
    weight_decay: float = 0.01
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    domain: DomainConfig = field(default_factory=DomainConfig)
    variant: str = "corte-full"
    alpha: float = 0.99
    beta: float = 0.60
    lambda_max: float = 5.0
    total_steps: int = 3000
    batch_size: int = 8
    eval_every: int = 250
    hidden: int = 32
    patch: int = 3
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    teacher: EndpointDescriptor = field(default_factory=EndpointDescriptor)
    seed: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.total_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("total_steps, batch_size and eval_every must be >= 1")
        if self.patch < 1 or self.patch % 2 == 0 or self.hidden < 1:
            raise ValueError("patch must be odd and hidden >= 1")
        if self.uses_ema:
            if not 0.0 <= self.alpha < 1.0:
                raise ValueError("alpha must lie in [0, 1)")
            if not 0.0 < self.beta <= 1.0:
                raise ValueError("beta must lie in (0, 1]")
            if self.lambda_max < 0:
                raise ValueError("lambda_max must be nonnegative")

    @property
    def statistic(self):
        return VARIANT_PARTS[self.variant][0]

    @property
    def uses_augment(self):
        return VARIANT_PARTS[self.variant][1]

    @property
    def uses_ema(self):
        return VARIANT_PARTS[self.variant][2]

    def subseeds(self):
        return {name: derive_seed(self.seed, name) for name in SUBSEED_NAMES}

    def to_dict(self):
        return {
            "domain": self.domain.to_dict(),
            "variant": self.variant,
            "alpha": self.alpha,
            "beta": self.beta,
            "lambda_max": self.lambda_max,
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "eval_every": self.eval_every,
            "hidden": self.hidden,
            "patch": self.patch,
            "optimizer": self.optimizer.to_dict(),
            "augment": self.augment.to_dict(),
            "teacher": self.teacher.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "domain" in d:
            d["domain"] = DomainConfig.from_dict(d["domain"])
        if "optimizer" in d:
            d["optimizer"] = OptimConfig.from_dict(d["optimizer"])
        if "augment" in d:
            d["augment"] = AugmentSpec.from_dict(d["augment"])
        if "teacher" in d:
            d["teacher"] = EndpointDescriptor.from_dict(d["teacher"])
        return cls(**d)

    def to_json(self):
        return canonical_json(self.to_dict())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            f.write(json.dumps(self.to_dict(), indent=2, sort_keys=True))
            f.write("\n")

    def config_hash(self):
        """Digest of every field that can change results (not output_dir or teacher transport)."""
        d = self.to_dict()
        del d["output_dir"], d["teacher"]
        return config_digest(d)[:16]

    def with_variant(self, variant, **changes):
        return replace(self, variant=variant, **changes)


def default_config(seed=1, variant="corte-full", output_dir=None):
    return ExperimentConfig(
        domain=DomainConfig(source=default_source_spec(seed)),
        variant=variant,
        seed=seed,
        output_dir=output_dir or f"runs/{variant}-seed{seed}",
    )
