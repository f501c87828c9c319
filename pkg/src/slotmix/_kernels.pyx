# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; see _kernels_py.py for the reference."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, INFINITY, M_PI

cnp.import_array()


def log_gaussian_fwd(double[:, :, ::1] x, double[:, :, ::1] mu,
                     double[:, :, ::1] var, bint quadratic_only=False):
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], D = x.shape[2], K = mu.shape[1]
    cdef Py_ssize_t b, i, k, d
    cdef double acc, diff
    cdef double log2pi = log(2.0 * M_PI)
    out_arr = np.empty((B, N, K), dtype=np.float64)
    inv_arr = np.empty((B, K, D), dtype=np.float64)
    logdet_arr = np.zeros((B, K), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] inv = inv_arr
    cdef double[:, ::1] logdet = logdet_arr
    for b in range(B):
        for k in range(K):
            acc = 0.0
            for d in range(D):
                inv[b, k, d] = 1.0 / var[b, k, d]
                acc += log(var[b, k, d]) + log2pi
            logdet[b, k] = 0.0 if quadratic_only else acc
        for i in range(N):
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    diff = x[b, i, d] - mu[b, k, d]
                    acc += diff * diff * inv[b, k, d]
                out[b, i, k] = -0.5 * (acc + logdet[b, k])
    return out_arr


def log_gaussian_bwd(double[:, :, ::1] g, double[:, :, ::1] x, double[:, :, ::1] mu,
                     double[:, :, ::1] var, bint quadratic_only=False):
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], D = x.shape[2], K = mu.shape[1]
    cdef Py_ssize_t b, i, k, d
    cdef double gik, s, gsum
    gx_arr = np.zeros((B, N, D), dtype=np.float64)
    gmu_arr = np.zeros((B, K, D), dtype=np.float64)
    gvar_arr = np.zeros((B, K, D), dtype=np.float64)
    inv_arr = np.empty((B, K, D), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gmu = gmu_arr
    cdef double[:, :, ::1] gvar = gvar_arr
    cdef double[:, :, ::1] inv = inv_arr
    for b in range(B):
        for k in range(K):
            for d in range(D):
                inv[b, k, d] = 1.0 / var[b, k, d]
        for i in range(N):
            for k in range(K):
                gik = g[b, i, k]
                for d in range(D):
                    s = (x[b, i, d] - mu[b, k, d]) * inv[b, k, d]
                    gx[b, i, d] -= gik * s
                    gmu[b, k, d] += gik * s
                    gvar[b, k, d] += 0.5 * gik * s * s
        if not quadratic_only:
            for k in range(K):
                gsum = 0.0
                for i in range(N):
                    gsum += g[b, i, k]
                for d in range(D):
                    gvar[b, k, d] -= 0.5 * gsum * inv[b, k, d]
    return gx_arr, gmu_arr, gvar_arr


def hungarian(cost_in):
    cdef double[:, ::1] c = np.ascontiguousarray(cost_in, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur, ui
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    minv_arr = np.empty(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.intp)
    way_arr = np.zeros(n + 1, dtype=np.intp)
    used_arr = np.zeros(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] minv = minv_arr
    cdef Py_ssize_t[::1] p = p_arr
    cdef Py_ssize_t[::1] way = way_arr
    cdef unsigned char[::1] used = used_arr
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            ui = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign
