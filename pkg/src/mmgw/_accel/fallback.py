"""Pure-NumPy fallback for the compiled log-sum-exp kernel."""

import numpy as np
from scipy.special import logsumexp


def lse_matvec(K, v, out):
    """out[a] = log sum_b exp(K[a, b] + v[b]), -inf safe."""
    with np.errstate(invalid="ignore"):
        res = logsumexp(K + v[None, :], axis=1)
    # logsumexp turns all-(-inf) rows into nan on some scipy versions
    bad = np.isnan(res) & np.all(np.isneginf(K + v[None, :]), axis=1)
    if np.any(bad):
        res = np.where(bad, -np.inf, res)
    out[:] = res
    return out
