# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused attention kernel (float64, single head).

Same contract as pyref.attention; fuses the logit, softmax, and weighted-sum
loops so small token counts avoid per-op numpy overhead.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def attention(q, k, v, double scale):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention expects 2-D q, k, v")
    if k.shape[1] != q.shape[1]:
        raise ValueError("q and k feature dims differ")
    if v.shape[0] != k.shape[0]:
        raise ValueError("k and v row counts differ")
    return _attention(q, k, v, scale)


def _attention(double[:, ::1] q, double[:, ::1] k, double[:, ::1] v, double scale):
    cdef Py_ssize_t n = q.shape[0]
    cdef Py_ssize_t d = q.shape[1]
    cdef Py_ssize_t m = k.shape[0]
    cdef Py_ssize_t dv = v.shape[1]
    out_arr = np.zeros((n, dv), dtype=np.float64)
    w_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] w = w_arr
    cdef Py_ssize_t i, j, a
    cdef double acc, mx, total, wij
    with nogil:
        for i in range(n):
            mx = -INFINITY
            for j in range(m):
                acc = 0.0
                for a in range(d):
                    acc += q[i, a] * k[j, a]
                acc *= scale
                w[i, j] = acc
                if acc > mx:
                    mx = acc
            total = 0.0
            for j in range(m):
                acc = exp(w[i, j] - mx)
                w[i, j] = acc
                total += acc
            for j in range(m):
                w[i, j] /= total
            for j in range(m):
                wij = w[i, j]
                for a in range(dv):
                    out[i, a] += wij * v[j, a]
    return out_arr, w_arr
