"""Photometric-style strong augmentation plus a joint horizontal flip.

Jitter and blur touch the features only; the flip moves features and mask
together so every pseudo-label stays on its pixel.
"""
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..seeding import rng


@dataclass(frozen=True)
class AugmentSpec:
    channel_scale_range: tuple = (0.9, 1.1)
    channel_offset_stddev: float = 0.1
    blur_sigma_range: tuple = (0.0, 0.0)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.channel_scale_range
        if not 0 < lo <= hi:
            raise ValueError("channel_scale_range must satisfy 0 < lo <= hi")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi:
            raise ValueError("blur_sigma_range must satisfy 0 <= lo <= hi")
        if self.channel_offset_stddev < 0:
            raise ValueError("channel_offset_stddev must be nonnegative")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        object.__setattr__(self, "channel_scale_range", tuple(float(x) for x in self.channel_scale_range))
        object.__setattr__(self, "blur_sigma_range", tuple(float(x) for x in self.blur_sigma_range))

    @classmethod
    def identity(cls, seed=0):
        return cls((1.0, 1.0), 0.0, (0.0, 0.0), 0.0, seed)

    @property
    def is_identity(self):
        return (
            self.channel_scale_range == (1.0, 1.0)
            and self.channel_offset_stddev == 0.0
            and self.blur_sigma_range == (0.0, 0.0)
            and self.flip_prob == 0.0
        )

    def to_dict(self):
        return {
            "channel_scale_range": list(self.channel_scale_range),
            "channel_offset_stddev": self.channel_offset_stddev,
            "blur_sigma_range": list(self.blur_sigma_range),
            "flip_prob": self.flip_prob,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "channel_scale_range": tuple(d["channel_scale_range"]),
                      "blur_sigma_range": tuple(d["blur_sigma_range"])})


def augment(features, mask, spec, step_seed):
    """Return (augmented features, aligned mask); deterministic in (spec.seed, step_seed)."""
    features = np.asarray(features, dtype=np.float64)
    d = features.shape[-1]
    g = rng(spec.seed, step_seed, "augment")
    # fixed draw order regardless of which stages are active
    scale = g.uniform(*spec.channel_scale_range, size=d)
    offset = g.standard_normal(d) * spec.channel_offset_stddev
    sigma = g.uniform(*spec.blur_sigma_range)
    flip = g.random() < spec.flip_prob

    out = features
    if spec.channel_scale_range != (1.0, 1.0) or spec.channel_offset_stddev > 0:
        out = out * scale + offset
    if sigma > 0:
        out = gaussian_filter(out, sigma=(sigma, sigma, 0), mode="nearest")
    if flip:
        out = out[:, ::-1, :]
        mask = mask.flipped()
    return np.ascontiguousarray(out), mask
