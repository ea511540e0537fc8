# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

Must stay bit-identical to ``_fallback.py``: same accumulation order,
same float widths, and the extension is built with contraction disabled
so no FMA sneaks in where the numpy path does mul-then-add.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport pow, sqrt, sqrtf

cnp.import_array()


def nearest_code(double[:, ::1] queries, double[:, ::1] codebook):
    cdef Py_ssize_t n = queries.shape[0]
    cdef Py_ssize_t k = codebook.shape[0]
    cdef Py_ssize_t d = queries.shape[1]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(n, dtype=np.int64)
    cdef long long[::1] ov = out
    cdef Py_ssize_t i, j, c
    cdef double acc, best, diff
    cdef Py_ssize_t best_idx
    with nogil:
        for i in range(n):
            best = -1.0
            best_idx = 0
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = queries[i, j] - codebook[c, j]
                    acc += diff * diff
                if best < 0.0 or acc < best:
                    best = acc
                    best_idx = c
            ov[i] = best_idx
    return out


def adam_update(float[::1] param, float[::1] grad, float[::1] m,
                float[::1] v, double lr, double beta1, double beta2,
                double eps, long long step):
    cdef float b1 = <float> beta1
    cdef float omb1 = <float> (1.0 - beta1)
    cdef float b2 = <float> beta2
    cdef float omb2 = <float> (1.0 - beta2)
    cdef float bc1 = <float> (1.0 - pow(beta1, <double> step))
    cdef float bc2 = <float> (1.0 - pow(beta2, <double> step))
    cdef float lr32 = <float> lr
    cdef float eps32 = <float> eps
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef float gg, mh, vh, den
    with nogil:
        for i in range(n):
            m[i] = b1 * m[i] + omb1 * grad[i]
            gg = grad[i] * grad[i]
            v[i] = b2 * v[i] + omb2 * gg
            mh = m[i] / bc1
            vh = v[i] / bc2
            den = sqrtf(vh) + eps32
            param[i] -= (lr32 * mh) / den
    return None
