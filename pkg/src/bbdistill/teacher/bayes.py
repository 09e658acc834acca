import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)


def bayes_posterior(features, source_spec):
    """Exact class posterior of ``source_spec`` at every pixel, as a C x H x W map."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != source_spec.feature_dim:
        raise ValueError(
            f"expected H x W x {source_spec.feature_dim} features, got shape {features.shape}"
        )
    bad = ~np.isfinite(features)
    if bad.any():
        i, j, k = np.argwhere(bad)[0]
        raise ValueError(f"non-finite feature at pixel ({i}, {j}), channel {k}")

    means, stds = source_spec.means, source_spec.stddevs
    with np.errstate(divide="ignore"):
        log_prior = np.log(source_spec.priors)
    z = (features[:, :, None, :] - means) / stds  # H x W x C x d
    loglik = -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(stds), axis=-1) - 0.5 * source_spec.feature_dim * _LOG_2PI
    logits = loglik + log_prior
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return np.ascontiguousarray(np.moveaxis(p, -1, 0))
