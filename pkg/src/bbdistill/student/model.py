"""Per-pixel MLP over a k x k feature patch, with hand-written backprop.

Batched arrays are B x H x W x d features and B x C x H x W probabilities.
"""
from dataclasses import dataclass

import numpy as np

from ..pseudolabel import NONE

LOG_CLAMP = 1e-12
PARAM_ORDER = ("w1", "b1", "w2", "b2")


@dataclass
class StudentParams:
    w1: np.ndarray  # h x (k*k*d)
    b1: np.ndarray  # h
    w2: np.ndarray  # C x h
    b2: np.ndarray  # C

    def __post_init__(self):
        h = self.w1.shape[0]
        if self.b1.shape != (h,) or self.w2.shape[1] != h or self.b2.shape != (self.w2.shape[0],):
            raise ValueError("inconsistent parameter shapes")
        k2d = self.w1.shape[1]
        if k2d < 1:
            raise ValueError("w1 must have at least one input column")

    @property
    def hidden(self):
        return self.w1.shape[0]

    @property
    def num_classes(self):
        return self.w2.shape[0]

    def patch_side(self, feature_dim):
        k2 = self.w1.shape[1] // feature_dim
        k = int(round(np.sqrt(k2)))
        if k * k * feature_dim != self.w1.shape[1] or k % 2 == 0:
            raise ValueError(f"w1 width {self.w1.shape[1]} is not k*k*{feature_dim} for odd k")
        return k

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_ORDER}

    @classmethod
    def from_dict(cls, d):
        return cls(**{name: np.asarray(d[name], dtype=np.float64) for name in PARAM_ORDER})

    def copy(self):
        return StudentParams(*(getattr(self, n).copy() for n in PARAM_ORDER))

    @classmethod
    def zeros(cls, feature_dim, num_classes, hidden=32, patch=3):
        return cls(
            np.zeros((hidden, patch * patch * feature_dim)),
            np.zeros(hidden),
            np.zeros((num_classes, hidden)),
            np.zeros(num_classes),
        )

    @classmethod
    def init(cls, feature_dim, num_classes, hidden=32, patch=3, rng=None):
        if patch < 1 or patch % 2 == 0:
            raise ValueError("patch side must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = patch * patch * feature_dim
        return cls(
            rng.standard_normal((hidden, fan_in)) * np.sqrt(2.0 / fan_in),
            np.zeros(hidden),
            rng.standard_normal((num_classes, hidden)) * np.sqrt(1.0 / hidden),
            np.zeros(num_classes),
        )


def extract_patches(features, k):
    """B x H x W x d -> B x H x W x (k*k*d), edge-replicated, patch-row-major then channel."""
    r = k // 2
    B, H, W, d = features.shape
    padded = np.pad(features, ((0, 0), (r, r), (r, r), (0, 0)), mode="edge")
    cols = [padded[:, i:i + H, j:j + W, :] for i in range(k) for j in range(k)]
    return np.concatenate(cols, axis=-1)


def _as_batch(features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 3:
        return features[None], True
    if features.ndim != 4:
        raise ValueError(f"features must be H x W x d or B x H x W x d, got {features.shape}")
    return features, False


def _forward(params, features):
    B, H, W, d = features.shape
    k = params.patch_side(d)
    x = extract_patches(features, k).reshape(B * H * W, -1)
    pre = x @ params.w1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.w2.T + params.b2
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    return p, (x, pre, hidden)


def _to_maps(p, B, H, W):
    return np.ascontiguousarray(p.reshape(B, H, W, -1).transpose(0, 3, 1, 2))


def forward(params, features):
    """Class probabilities, C x H x W for one scene or B x C x H x W for a batch."""
    batch, single = _as_batch(features)
    B, H, W, _ = batch.shape
    p, _ = _forward(params, batch)
    maps = _to_maps(p, B, H, W)
    return maps[0] if single else maps


def _backprop(params, cache, dlogits):
    x, pre, hidden = cache
    dw2 = dlogits.T @ hidden
    db2 = dlogits.sum(axis=0)
    dpre = (dlogits @ params.w2) * (pre > 0)
    dw1 = dpre.T @ x
    db1 = dpre.sum(axis=0)
    return StudentParams(dw1, db1, dw2, db2)


def _mask_arrays(masks, B, H, W):
    if not isinstance(masks, (list, tuple)):
        masks = [masks]
    if len(masks) != B:
        raise ValueError(f"{len(masks)} masks for {B} scenes")
    classes = np.stack([m.classes for m in masks]).reshape(-1)
    weights = np.stack([m.weights for m in masks]).reshape(-1)
    if classes.shape[0] != B * H * W:
        raise ValueError("mask and feature shapes disagree")
    return classes, weights


def ce_loss_and_grad(params, features, masks):
    """Masked weighted cross-entropy, averaged over scenes, and its parameter gradient.

    Per scene the loss is -(1/HW) sum_i w_i log p_i[c_i]; a batch loss is the mean
    over scenes.
    """
    batch, _ = _as_batch(features)
    B, H, W, _ = batch.shape
    p, cache = _forward(params, batch)
    classes, weights = _mask_arrays(masks, B, H, W)
    sup = classes != NONE
    rows = np.flatnonzero(sup)
    picked = p[rows, classes[rows]]
    scale = 1.0 / (B * H * W)
    loss = -scale * float(np.sum(weights[rows] * np.log(np.maximum(picked, LOG_CLAMP))))
    # d/dlogits of -w log p_c is w (p - onehot_c); clamp only matters below 1e-12
    dlogits = np.zeros_like(p)
    dlogits[rows] = p[rows] * weights[rows, None]
    dlogits[rows, classes[rows]] -= weights[rows] * (picked > LOG_CLAMP)
    dlogits *= scale
    return loss, _backprop(params, cache, dlogits)


def kl_loss_and_grad(params, features, teacher_probs):
    """Pixel-mean KL(teacher || student) averaged over scenes, and its gradient."""
    batch, single = _as_batch(features)
    B, H, W, _ = batch.shape
    q = np.asarray(teacher_probs)
    if single:
        q = q[None]
    q = q.transpose(0, 2, 3, 1).reshape(B * H * W, -1)
    p, cache = _forward(params, batch)
    loss = float(np.sum(_kl_terms(q, p))) / (B * H * W)
    # sum_c q_c = 1, so d KL / d logits = p - q
    dlogits = (p - q) / (B * H * W)
    return loss, _backprop(params, cache, dlogits)


def _kl_terms(q, p):
    pos = q > 0
    out = np.zeros_like(q)
    out[pos] = q[pos] * (np.log(q[pos]) - np.log(np.maximum(p[pos], LOG_CLAMP)))
    return out


def masked_ce_loss(probs, mask):
    """Weighted cross-entropy of one C x H x W map against a mask, normalized by H*W."""
    probs = np.asarray(probs)
    if probs.shape[1:] != mask.shape:
        raise ValueError("probability map and mask differ in spatial shape")
    H, W = mask.shape
    sup = mask.supervised
    if not sup.any():
        return 0.0
    ii, jj = np.nonzero(sup)
    picked = probs[mask.classes[ii, jj], ii, jj]
    return -float(np.sum(mask.weights[ii, jj] * np.log(np.maximum(picked, LOG_CLAMP)))) / (H * W)


def kd_kl_loss(student_probs, teacher_probs):
    p = np.asarray(student_probs)
    q = np.asarray(teacher_probs)
    if p.shape != q.shape:
        raise ValueError("student and teacher maps differ in shape")
    C = p.shape[0]
    terms = _kl_terms(q.reshape(C, -1).T, p.reshape(C, -1).T)
    return float(np.sum(terms)) / (p.size // C)


def backward(params, features, mask):
    """Gradient of masked_ce_loss(forward(params, features), mask) w.r.t. every parameter."""
    return ce_loss_and_grad(params, features, mask)[1]
