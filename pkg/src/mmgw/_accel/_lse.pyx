# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled log-sum-exp kernels for the tree Sinkhorn message passing.

Row-wise fused max/exp/sum/log over ``K[a, :] + v`` avoids the temporary
n*m array a vectorized implementation would allocate on every message.
Entries of -inf (structurally forbidden states) are admitted and behave
like zero-mass terms; all-(-inf) rows yield -inf.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, INFINITY


def lse_matvec(double[:, ::1] K, double[::1] v, double[::1] out):
    """out[a] = log sum_b exp(K[a, b] + v[b]), -inf safe."""
    cdef Py_ssize_t n = K.shape[0]
    cdef Py_ssize_t m = K.shape[1]
    cdef Py_ssize_t a, b
    cdef double hi, acc, x
    if v.shape[0] != m or out.shape[0] != n:
        raise ValueError("lse_matvec: shape mismatch")
    for a in range(n):
        hi = -INFINITY
        for b in range(m):
            x = K[a, b] + v[b]
            if x > hi:
                hi = x
        if hi == -INFINITY:
            out[a] = -INFINITY
            continue
        acc = 0.0
        for b in range(m):
            x = K[a, b] + v[b]
            if x != -INFINITY:
                acc += exp(x - hi)
        out[a] = hi + log(acc)
