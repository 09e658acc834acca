"""Probability maps are plain C x H x W float64 arrays; this holds their checks."""
import numpy as np

SIMPLEX_TOL = 1e-9


def simplex_violation(probs, tol=SIMPLEX_TOL):
    """Return a description of the first simplex violation in ``probs``, or None."""
    probs = np.asarray(probs)
    if probs.ndim != 3:
        return f"expected a C x H x W map, got shape {probs.shape}"
    if not np.all(np.isfinite(probs)):
        return "non-finite probability"
    if np.any(probs < 0):
        c, i, j = np.argwhere(probs < 0)[0]
        return f"negative probability at class {c}, pixel ({i}, {j})"
    err = np.abs(probs.sum(axis=0) - 1.0)
    if np.any(err > tol):
        i, j = np.unravel_index(np.argmax(err), err.shape)
        return f"pixel ({i}, {j}) sums to {probs[:, i, j].sum()!r}"
    return None


def check_simplex(probs, tol=SIMPLEX_TOL):
    msg = simplex_violation(probs, tol)
    if msg is not None:
        raise ValueError(msg)
    return probs


def hard_argmax(probs):
    # np.argmax picks the first maximum, i.e. ties go to the lowest class index
    return np.argmax(probs, axis=0)
