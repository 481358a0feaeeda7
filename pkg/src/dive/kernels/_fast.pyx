# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled batched attention kernel (same contract as kernels._ref)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def attention_forward(q, k, v, double scale):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[:, :, ::1] qv = q, kv = k, vv = v
    cdef Py_ssize_t B = qv.shape[0], n = qv.shape[1], d = qv.shape[2]
    cdef Py_ssize_t m = kv.shape[1]
    out_arr = np.empty((B, n, d), dtype=np.float64)
    probs_arr = np.empty((B, n, m), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr, probs = probs_arr
    cdef Py_ssize_t b, i, j, c
    cdef double acc, mx, z

    for b in range(B):
        for i in range(n):
            mx = -1e300
            for j in range(m):
                acc = 0.0
                for c in range(d):
                    acc += qv[b, i, c] * kv[b, j, c]
                acc *= scale
                probs[b, i, j] = acc
                if acc > mx:
                    mx = acc
            z = 0.0
            for j in range(m):
                acc = exp(probs[b, i, j] - mx)
                probs[b, i, j] = acc
                z += acc
            for j in range(m):
                probs[b, i, j] /= z
            for c in range(d):
                acc = 0.0
                for j in range(m):
                    acc += probs[b, i, j] * vv[b, j, c]
                out[b, i, c] = acc
    return out_arr, probs_arr


def attention_backward(q, k, v, probs, d_out, double scale):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    d_out = np.ascontiguousarray(d_out, dtype=np.float64)
    cdef double[:, :, ::1] qv = q, kv = k, vv = v, pv = probs, dov = d_out
    cdef Py_ssize_t B = qv.shape[0], n = qv.shape[1], d = qv.shape[2]
    cdef Py_ssize_t m = kv.shape[1]
    dq_arr = np.zeros((B, n, d), dtype=np.float64)
    dk_arr = np.zeros((B, m, d), dtype=np.float64)
    dv_arr = np.zeros((B, m, d), dtype=np.float64)
    dp_arr = np.empty(m, dtype=np.float64)
    cdef double[:, :, ::1] dq = dq_arr, dk = dk_arr, dv = dv_arr
    cdef double[::1] dp = dp_arr
    cdef Py_ssize_t b, i, j, c
    cdef double acc, row, ds

    for b in range(B):
        for i in range(n):
            row = 0.0
            for j in range(m):
                acc = 0.0
                for c in range(d):
                    acc += dov[b, i, c] * vv[b, j, c]
                dp[j] = acc
                row += acc * pv[b, i, j]
            for j in range(m):
                ds = pv[b, i, j] * (dp[j] - row) * scale
                for c in range(d):
                    dv[b, j, c] += pv[b, i, j] * dov[b, i, c]
                    dq[b, i, c] += ds * kv[b, j, c]
                    dk[b, j, c] += ds * qv[b, i, c]
    return dq_arr, dk_arr, dv_arr
