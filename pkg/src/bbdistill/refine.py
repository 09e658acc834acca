"""EMA teacher over student parameters and pseudo-label refinement from its confident pixels."""
from dataclasses import dataclass

import numpy as np

from .pseudolabel import NONE, WeightedMask


@dataclass(frozen=True)
class EmaState:
    params: object  # StudentParams
    alpha: float
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")

    @classmethod
    def init_from(cls, params, alpha):
        return cls(params.copy(), alpha, 0)


@dataclass(frozen=True)
class RefineConfig:
    beta: float = 0.60
    lambda_max: float = 5.0
    total_steps: int = 3000

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def ema_update(state, theta):
    """Return a new state with params ``alpha * params + (1 - alpha) * theta``."""
    old = state.params.as_dict()
    new = theta.as_dict()
    if old.keys() != new.keys() or any(old[k].shape != new[k].shape for k in old):
        raise ValueError("EMA and student parameter shapes differ")
    a = state.alpha
    mixed = {k: a * old[k] + (1.0 - a) * new[k] for k in old}
    return EmaState(type(state.params).from_dict(mixed), a, state.step + 1)


def lambda_at(step, config):
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    return config.lambda_max * step / config.total_steps


def refine_mask(m, ema_probs, step, config):
    """Fill unsupervised pixels with the EMA argmax, weighted lambda_t, where the EMA is confident.

    Pixels the teacher already supervises are left untouched. With lambda_t = 0
    nothing is added, so the result equals ``m``.
    """
    if ema_probs.shape[1:] != m.shape:
        raise ValueError("EMA map and mask differ in spatial shape")
    lam = lambda_at(step, config)
    if lam == 0.0:
        return m
    # argmax over qualifying classes; with beta > 0.5 at most one class qualifies
    qualifying = np.where(ema_probs >= config.beta, ema_probs, -np.inf)
    best = np.argmax(qualifying, axis=0)
    confident = np.isfinite(np.max(qualifying, axis=0))
    fill = confident & ~m.supervised
    classes = np.where(fill, best, m.classes)
    weights = np.where(fill, lam, m.weights)
    return WeightedMask(classes.astype(np.int64), weights)


def refined_pixels(refined, original):
    """Boolean grid of pixels supervised by refinement rather than by the teacher."""
    return refined.supervised & (original.classes == NONE)
