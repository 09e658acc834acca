"""Seeded synthetic segmentation domains with a controllable source/target shift.

A domain is a set of diagonal Gaussians (one per class) emitting per-pixel
feature vectors over a label layout made of horizontal bands, optionally
overstamped with per-sample rectangles of minority classes.
"""
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import canonical_json, derive_seed, rng

LAYOUT_KINDS = ("horizontal-bands", "bands-plus-rectangles")
ROLES = ("source", "target-train", "target-test")

# target-train and target-test share a spec, so their sample seeds must not overlap
ROLE_SEED_OFFSET = {"source": 0, "target-train": 0, "target-test": 1 << 32}


@dataclass(frozen=True)
class Layout:
    kind: str = "horizontal-bands"
    rect_classes: tuple = ()
    max_rects: int = 0
    min_size: int = 2
    max_size: int = 4

    def __post_init__(self):
        if self.kind not in LAYOUT_KINDS:
            raise ValueError(f"unknown layout kind {self.kind!r}")
        if self.min_size < 1 or self.max_size < self.min_size:
            raise ValueError("rectangle sizes must satisfy 1 <= min_size <= max_size")
        if self.max_rects < 0:
            raise ValueError("max_rects must be >= 0")

    def to_dict(self):
        return {
            "kind": self.kind,
            "rect_classes": list(self.rect_classes),
            "max_rects": self.max_rects,
            "min_size": self.min_size,
            "max_size": self.max_size,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["rect_classes"] = tuple(int(c) for c in d.get("rect_classes", ()))
        return cls(**d)


@dataclass(frozen=True)
class DomainSpec:
    """Generative parameters of one domain. Array fields are stored as nested tuples."""

    class_means: tuple
    class_stddevs: tuple
    class_priors: tuple
    layout: Layout = field(default_factory=Layout)
    seed: int = 0

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        stds = np.asarray(self.class_stddevs, dtype=np.float64)
        priors = np.asarray(self.class_priors, dtype=np.float64)
        object.__setattr__(self, "class_means", _freeze(means))
        object.__setattr__(self, "class_stddevs", _freeze(stds))
        object.__setattr__(self, "class_priors", _freeze(priors))
        if means.ndim != 2 or means.shape[0] < 2 or means.shape[1] < 1:
            raise ValueError(f"class_means must be C x d with C >= 2, d >= 1; got {means.shape}")
        if stds.shape != means.shape:
            raise ValueError("class_stddevs must match class_means in shape")
        if priors.shape != (means.shape[0],):
            raise ValueError("class_priors must have one entry per class")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(stds))):
            raise ValueError("means and stddevs must be finite")
        if np.any(stds <= 0):
            raise ValueError("all stddevs must be strictly positive")
        if np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValueError("class_priors must be nonnegative and sum to 1")
        if any(not 0 <= c < means.shape[0] for c in self.layout.rect_classes):
            raise ValueError("rect_classes out of class range")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def num_classes(self):
        return len(self.class_priors)

    @property
    def feature_dim(self):
        return len(self.class_means[0])

    @property
    def means(self):
        return np.array(self.class_means)

    @property
    def stddevs(self):
        return np.array(self.class_stddevs)

    @property
    def priors(self):
        return np.array(self.class_priors)

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "class_means": [list(r) for r in self.class_means],
            "class_stddevs": [list(r) for r in self.class_stddevs],
            "class_priors": list(self.class_priors),
            "layout": self.layout.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        spec = cls(
            class_means=d["class_means"],
            class_stddevs=d["class_stddevs"],
            class_priors=d["class_priors"],
            layout=Layout.from_dict(d.get("layout", {})),
            seed=int(d.get("seed", 0)),
        )
        for key, value in (("num_classes", spec.num_classes), ("feature_dim", spec.feature_dim)):
            if key in d and int(d[key]) != value:
                raise ValueError(f"{key}={d[key]} disagrees with array shapes ({value})")
        return spec

    def to_json(self):
        return canonical_json(self.to_dict())


def _freeze(a):
    if a.ndim == 1:
        return tuple(float(x) for x in a)
    return tuple(tuple(float(x) for x in row) for row in a)


@dataclass(frozen=True)
class SceneSample:
    features: np.ndarray  # H x W x d
    labels: np.ndarray  # H x W, int
    sample_id: int

    def __post_init__(self):
        if self.features.ndim != 3 or self.labels.shape != self.features.shape[:2]:
            raise ValueError("features must be H x W x d and labels H x W")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"sample {self.sample_id}: non-finite features")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)


@dataclass(frozen=True)
class DatasetHandle:
    spec: DomainSpec
    samples: tuple
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown dataset role {self.role!r}")
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.sample_id for s in self.samples]
        if ids != list(range(len(ids))):
            raise ValueError("sample ids must be unique and contiguous from 0")
        for s in self.samples:
            if s.features.shape[2] != self.spec.feature_dim:
                raise ValueError(f"sample {s.sample_id}: feature dim mismatch")
            if s.labels.min() < 0 or s.labels.max() >= self.spec.num_classes:
                raise ValueError(f"sample {s.sample_id}: label out of range")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def band_heights(priors, H):
    """Largest-remainder split of H rows proportionally to priors."""
    priors = np.asarray(priors, dtype=np.float64)
    exact = priors * H
    heights = np.floor(exact).astype(int)
    short = H - heights.sum()
    # ties in the remainder go to the lower class index
    order = sorted(range(len(priors)), key=lambda c: (-(exact[c] - heights[c]), c))
    for c in order[:short]:
        heights[c] += 1
    return heights


def stamp_rectangle(labels, top, left, height, width, cls):
    """Overwrite a clipped axis-aligned rectangle of ``labels`` with ``cls`` (returns a copy)."""
    out = labels.copy()
    out[max(top, 0):top + height, max(left, 0):left + width] = cls
    return out


def generate_layout(spec, sample_seed, H, W):
    if H < 4 or W < 4:
        raise ValueError(f"layouts need H, W >= 4; got {H}x{W}")
    heights = band_heights(spec.class_priors, H)
    starved = [c for c in range(spec.num_classes) if spec.class_priors[c] > 0 and heights[c] == 0]
    if starved:
        raise ValueError(f"classes {starved} get zero rows in a {H}-row band layout")
    labels = np.repeat(np.arange(spec.num_classes), heights)[:, None].repeat(W, axis=1)

    layout = spec.layout
    if layout.kind == "bands-plus-rectangles" and layout.rect_classes and layout.max_rects > 0:
        g = rng(spec.seed, sample_seed, "layout")
        n_rects = int(g.integers(0, layout.max_rects + 1))
        for _ in range(n_rects):
            cls = layout.rect_classes[int(g.integers(len(layout.rect_classes)))]
            rh = int(g.integers(layout.min_size, layout.max_size + 1))
            rw = int(g.integers(layout.min_size, layout.max_size + 1))
            top = int(g.integers(0, max(H - rh, 0) + 1))
            left = int(g.integers(0, max(W - rw, 0) + 1))
            labels = stamp_rectangle(labels, top, left, rh, rw, cls)
    return labels.astype(np.int64)


def emit_features(labels, spec, sample_seed):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= spec.num_classes:
        raise ValueError("labels out of class range for spec")
    H, W = labels.shape
    noise = rng(spec.seed, sample_seed, "features").standard_normal((H, W, spec.feature_dim))
    return spec.means[labels] + spec.stddevs[labels] * noise


def make_sample(spec, sample_seed, sample_id, H, W):
    labels = generate_layout(spec, sample_seed, H, W)
    return SceneSample(emit_features(labels, spec, sample_seed), labels, sample_id)


def make_dataset(spec, role, n, H, W):
    offset = ROLE_SEED_OFFSET[role]
    return DatasetHandle(spec, [make_sample(spec, offset + i, i, H, W) for i in range(n)], role)


def make_shifted_domain(source, shift, stddev_scale, seed=None):
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != source.means.shape:
        raise ValueError(f"shift shape {shift.shape} does not match means {source.means.shape}")
    if not stddev_scale > 0:
        raise ValueError("stddev_scale must be positive")
    if seed is None:
        seed = derive_seed(source.seed, "target-domain")
    return replace(
        source,
        class_means=source.means + shift,
        class_stddevs=source.stddevs * stddev_scale,
        seed=seed,
    )


# --- default benchmark -------------------------------------------------------

# Confusable pairs (0, 1) and (4, 5) move toward each other in the target domain,
# which is also noisier than the source; the source-fitted teacher is then
# overconfident exactly where the pairs overlap.
CONFUSABLE_PAIRS = ((0, 1), (4, 5))
DEFAULT_PULL = 0.4
DEFAULT_STDDEV_SCALE = 1.3

_DEFAULT_MEANS = (
    (0.0, 0.0, 0.0, 0.0),
    (3.5, 0.0, 0.0, 0.0),
    (0.0, 5.0, 0.0, 0.0),
    (0.0, 0.0, 5.0, 0.0),
    (0.0, 0.0, 0.0, 5.0),
    (3.5, 0.0, 0.0, 5.0),
)
_DEFAULT_PRIORS = (0.25, 0.15, 0.2, 0.15, 0.15, 0.1)


def default_source_spec(seed=0):
    return DomainSpec(
        class_means=_DEFAULT_MEANS,
        class_stddevs=np.full((6, 4), 1.0),
        class_priors=_DEFAULT_PRIORS,
        layout=Layout("bands-plus-rectangles", rect_classes=(4, 5), max_rects=3, min_size=3, max_size=8),
        seed=seed,
    )


def default_shift(source=None, pull=DEFAULT_PULL):
    """Move each confusable pair toward each other by ``pull`` of the gap (in total)."""
    source = source or default_source_spec()
    means = source.means
    shift = np.zeros_like(means)
    for a, b in CONFUSABLE_PAIRS:
        gap = means[b] - means[a]
        shift[a] += 0.5 * pull * gap
        shift[b] -= 0.5 * pull * gap
    return shift


# --- persistence --------------------------------------------------------------

_HEADER = struct.Struct("<I")
_BLOCK = struct.Struct("<QIII")


def save_dataset(path, dataset):
    header = canonical_json({"role": dataset.role, "num_samples": len(dataset), "spec": dataset.spec.to_dict()})
    raw = header.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(len(raw)))
        f.write(raw)
        for s in dataset:
            H, W, d = s.features.shape
            f.write(_BLOCK.pack(s.sample_id, H, W, d))
            f.write(np.ascontiguousarray(s.features, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        data = f.read()
    (n,) = _HEADER.unpack_from(data, 0)
    header = json.loads(data[_HEADER.size:_HEADER.size + n].decode("utf-8"))
    spec = DomainSpec.from_dict(header["spec"])
    pos = _HEADER.size + n
    samples = []
    for _ in range(header["num_samples"]):
        sid, H, W, d = _BLOCK.unpack_from(data, pos)
        pos += _BLOCK.size
        nf = H * W * d * 8
        features = np.frombuffer(data, dtype="<f8", count=H * W * d, offset=pos).reshape(H, W, d).astype(np.float64)
        pos += nf
        labels = np.frombuffer(data, dtype=np.uint8, count=H * W, offset=pos).reshape(H, W).astype(np.int64)
        pos += H * W
        samples.append(SceneSample(features, labels, sid))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return DatasetHandle(spec, samples, header["role"])
