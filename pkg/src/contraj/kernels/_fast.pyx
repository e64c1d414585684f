# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of ``_ref``: fused loops, no large temporaries.

Signatures match ``_ref`` exactly; ``kernels/__init__`` picks whichever
imports cleanly.
"""

import numpy as np

from libc.math cimport exp, log, INFINITY

LOG_2PI = float(np.log(2.0 * np.pi))
cdef double _LOG_2PI = LOG_2PI

IS_COMPILED = True


def pairwise_log_prob(object x, object means, object stds):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] sv = np.ascontiguousarray(stds, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = mv.shape[0], d = xv.shape[1]
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] iv = np.empty((k, d), dtype=np.float64)
    cdef double[::1] const = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t i, j, c
    cdef double acc, diff, s
    for j in range(k):
        acc = 0.0
        for c in range(d):
            s = sv[j, c]
            iv[j, c] = 1.0 / (s * s)
            acc += log(s)
        const[j] = acc + 0.5 * d * _LOG_2PI
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for c in range(d):
                diff = xv[i, c] - mv[j, c]
                acc += diff * diff * iv[j, c]
            out[i, j] = -0.5 * acc - const[j]
    return out_arr


def mixture_log_prob_fwd(object x, object means, object stds, object log_w):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] sv = np.ascontiguousarray(stds, dtype=np.float64)
    cdef double[::1] lw = np.ascontiguousarray(log_w, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = mv.shape[0], d = xv.shape[1]
    lp_arr = np.empty(n, dtype=np.float64)
    resp_arr = np.empty((n, k), dtype=np.float64)
    cdef double[::1] lp = lp_arr
    cdef double[:, ::1] resp = resp_arr
    cdef double[:, ::1] iv = np.empty((k, d), dtype=np.float64)
    cdef double[::1] const = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t i, j, c
    cdef double acc, diff, s, zmax, tot
    for j in range(k):
        acc = 0.0
        for c in range(d):
            s = sv[j, c]
            iv[j, c] = 1.0 / (s * s)
            acc += log(s)
        const[j] = acc + 0.5 * d * _LOG_2PI - lw[j]
    for i in range(n):
        zmax = -INFINITY
        for j in range(k):
            acc = 0.0
            for c in range(d):
                diff = xv[i, c] - mv[j, c]
                acc += diff * diff * iv[j, c]
            acc = -0.5 * acc - const[j]
            resp[i, j] = acc
            if acc > zmax:
                zmax = acc
        tot = 0.0
        for j in range(k):
            acc = exp(resp[i, j] - zmax)
            resp[i, j] = acc
            tot += acc
        lp[i] = zmax + log(tot)
        for j in range(k):
            resp[i, j] /= tot
    return lp_arr, resp_arr


def mixture_grad_x(object resp, object x, object means, object stds, object gout):
    cdef double[:, ::1] rv = np.ascontiguousarray(resp, dtype=np.float64)
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] mv = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] sv = np.ascontiguousarray(stds, dtype=np.float64)
    cdef double[::1] gv = np.ascontiguousarray(gout, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], k = mv.shape[0], d = xv.shape[1]
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] iv = np.empty((k, d), dtype=np.float64)
    cdef Py_ssize_t i, j, c
    cdef double s, r
    for j in range(k):
        for c in range(d):
            s = sv[j, c]
            iv[j, c] = 1.0 / (s * s)
    for i in range(n):
        for j in range(k):
            r = rv[i, j]
            for c in range(d):
                out[i, c] += r * (mv[j, c] - xv[i, c]) * iv[j, c]
        for c in range(d):
            out[i, c] *= gv[i]
    return out_arr
