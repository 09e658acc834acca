"""Hard pseudo-labels from teacher probabilities, with confidence-based filtering.

Masks carry one (class, weight) per pixel: ``classes`` uses ``NONE`` for
unsupervised pixels, whose weight is exactly 0.
"""
import json
from dataclasses import dataclass

import numpy as np

from .probmap import check_simplex, hard_argmax

NONE = -1


@dataclass(frozen=True)
class WeightedMask:
    classes: np.ndarray  # H x W int, NONE where unsupervised
    weights: np.ndarray  # H x W float

    def __post_init__(self):
        if self.classes.shape != self.weights.shape:
            raise ValueError("class and weight grids differ in shape")
        none = self.classes == NONE
        if np.any(self.weights[none] != 0) or np.any(self.weights[~none] <= 0):
            raise ValueError("weight must be 0 exactly where the class is none")

    @classmethod
    def empty(cls, shape):
        return cls(np.full(shape, NONE, dtype=np.int64), np.zeros(shape))

    @property
    def shape(self):
        return self.classes.shape

    @property
    def supervised(self):
        return self.classes != NONE

    def flipped(self):
        return WeightedMask(self.classes[:, ::-1].copy(), self.weights[:, ::-1].copy())

    def scaled(self, factor):
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return WeightedMask(self.classes, self.weights * factor)


@dataclass(frozen=True)
class ClassThresholds:
    tau: np.ndarray
    counts: np.ndarray
    never_predicted: np.ndarray

    def __post_init__(self):
        if not (self.tau.shape == self.counts.shape == self.never_predicted.shape) or self.tau.ndim != 1:
            raise ValueError("tau, counts and never_predicted must be matching C-vectors")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")
        if np.any(self.never_predicted != (self.counts == 0)):
            raise ValueError("never_predicted must flag exactly the zero-count classes")
        if np.any(self.tau[self.never_predicted] != 0):
            raise ValueError("never-predicted classes must have tau = 0")

    @property
    def num_classes(self):
        return len(self.tau)

    def to_json(self):
        return json.dumps(
            {
                "tau": [float(t) for t in self.tau],
                "counts": [int(c) for c in self.counts],
                "never_predicted": [bool(b) for b in self.never_predicted],
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            np.array(d["tau"], dtype=np.float64),
            np.array(d["counts"], dtype=np.int64),
            np.array(d["never_predicted"], dtype=bool),
        )

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())


def relative_confidence(q):
    """Gap between the largest and second-largest class probability at each pixel."""
    q = np.asarray(q)
    if q.shape[0] < 2:
        raise ValueError("relative confidence needs at least two classes")
    top2 = np.partition(q, -2, axis=0)[-2:]
    return np.clip(top2[1] - top2[0], 0.0, 1.0)


def absolute_confidence(q):
    return np.max(q, axis=0)


STATISTICS = {"rc": relative_confidence, "ac": absolute_confidence}


class ThresholdAccumulator:
    """Per-class running sums of a confidence statistic over teacher argmax classes.

    Accumulators built on disjoint shards can be combined with ``merge``.
    """

    def __init__(self, num_classes, statistic="rc"):
        self.statistic = statistic
        self._stat = STATISTICS[statistic]
        self.sums = np.zeros(num_classes)
        self.counts = np.zeros(num_classes, dtype=np.int64)

    def add(self, q):
        q = check_simplex(q)
        if q.shape[0] != len(self.sums):
            raise ValueError(f"map has {q.shape[0]} classes, accumulator {len(self.sums)}")
        winners = hard_argmax(q).ravel()
        self.sums += np.bincount(winners, weights=self._stat(q).ravel(), minlength=len(self.sums))
        self.counts += np.bincount(winners, minlength=len(self.sums))

    def merge(self, other):
        if other.statistic != self.statistic:
            raise ValueError("cannot merge accumulators of different statistics")
        self.sums += other.sums
        self.counts += other.counts
        return self

    def result(self):
        if self.counts.sum() == 0:
            raise ValueError("no pixels accumulated")
        never = self.counts == 0
        tau = np.where(never, 0.0, self.sums / np.maximum(self.counts, 1))
        return ClassThresholds(np.clip(tau, 0.0, 1.0), self.counts.copy(), never)


def compute_class_thresholds(teacher_outputs, statistic="rc"):
    """Single streaming pass over teacher maps; tau[c] is the mean statistic over pixels whose argmax is c."""
    acc = None
    for q in teacher_outputs:
        if acc is None:
            acc = ThresholdAccumulator(np.shape(q)[0], statistic)
        acc.add(q)
    if acc is None:
        raise ValueError("empty teacher output stream")
    return acc.result()


def _threshold_mask(q, statistic, thresholds):
    q = check_simplex(q)
    if q.shape[0] != thresholds.num_classes:
        raise ValueError("thresholds and map disagree on the class count")
    winners = hard_argmax(q)
    keep = statistic >= thresholds.tau[winners]
    return WeightedMask(np.where(keep, winners, NONE), keep.astype(np.float64))


def r2cp_mask(q, thresholds):
    return _threshold_mask(q, relative_confidence(q), thresholds)


def ac_mask(q, thresholds):
    """Absolute-confidence baseline; ``thresholds`` must come from the "ac" statistic."""
    return _threshold_mask(q, absolute_confidence(q), thresholds)


def naive_mask(q):
    q = check_simplex(q)
    winners = hard_argmax(q)
    return WeightedMask(winners, np.ones(winners.shape))
