"""Kernel selection: compiled extension when available, NumPy otherwise.

Set ``MGW_PURE_PYTHON=1`` to force the fallback (used by the benchmark
and by the kernel-equivalence tests).
"""

import os

import numpy as np

if os.environ.get("MGW_PURE_PYTHON"):
    from .fallback import lse_matvec as _lse_matvec_impl

    HAVE_COMPILED = False
else:
    try:
        from ._lse import lse_matvec as _lse_matvec_impl

        HAVE_COMPILED = True
    except ImportError:  # pragma: no cover - source tree without built ext
        from .fallback import lse_matvec as _lse_matvec_impl

        HAVE_COMPILED = False


def lse_matvec(K, v, out=None):
    """Return ``log(exp(K) @ exp(v))`` computed row-wise without overflow.

    K : (n, m) float array, may contain -inf
    v : (m,) float array, may contain -inf
    out : optional (n,) output buffer
    """
    K = np.ascontiguousarray(K, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if out is None:
        out = np.empty(K.shape[0], dtype=np.float64)
    _lse_matvec_impl(K, v, out)
    return out
