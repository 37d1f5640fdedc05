# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled quantizer kernels; mirror of ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs

cnp.import_array()


cdef inline Py_ssize_t _nearest(double v, const double[::1] c, Py_ssize_t m) nogil:
    # binary search for the insertion point, then compare the two neighbours
    cdef Py_ssize_t lo = 0, hi = m
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if c[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    if lo < 1:
        lo = 1
    elif lo > m - 1:
        lo = m - 1
    if fabs(v - c[lo - 1]) <= fabs(v - c[lo]):
        return lo - 1
    return lo


cdef inline double _sigmoid(double z) nogil:
    cdef double e
    if z >= 0:
        return 1.0 / (1.0 + exp(-z))
    e = exp(z)
    return e / (1.0 + e)


def assign(x, c):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = cv.shape[0], i
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _nearest(xv[i], cv, m)
    return out


def prox_x(y, c, double t):
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = yv.shape[0], m = cv.shape[0], i
    cdef double q, v
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            v = yv[i]
            q = cv[_nearest(v, cv, m)]
            if v >= q + t:
                ov[i] = v - t
            elif v <= q - t:
                ov[i] = v + t
            else:
                ov[i] = q
    return out


def group_sum(idx, upstream, Py_ssize_t m):
    cdef const cnp.int64_t[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const double[::1] uv = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef Py_ssize_t n = iv.shape[0], i
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[iv[i]] += uv[i]
    return out


def signed_counts(x, c, idx):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef const cnp.int64_t[::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t n = xv.shape[0], i, j
    out = np.zeros(cv.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            j = iv[i]
            if xv[i] > cv[j]:
                ov[j] += 1.0
            elif xv[i] < cv[j]:
                ov[j] -= 1.0
    return out


def soft_quantize(x, c, double P):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = cv.shape[0], i, k
    cdef double acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for k in range(1, m):
                acc += (cv[k] - cv[k - 1]) * _sigmoid(P * (xv[i] - 0.5 * (cv[k] + cv[k - 1])))
            ov[i] = cv[0] + acc
    return out


def soft_dx(x, c, double P):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = cv.shape[0], i, k
    cdef double acc, s
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            acc = 0.0
            for k in range(1, m):
                s = _sigmoid(P * (xv[i] - 0.5 * (cv[k] + cv[k - 1])))
                acc += (cv[k] - cv[k - 1]) * s * (1.0 - s)
            ov[i] = P * acc
    return out


def soft_dc(x, c, double P):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = cv.shape[0], i, k
    cdef double s, half
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for i in range(n):
            ov[0, i] = 1.0
            for k in range(1, m):
                s = _sigmoid(P * (xv[i] - 0.5 * (cv[k] + cv[k - 1])))
                half = 0.5 * P * (cv[k] - cv[k - 1]) * s * (1.0 - s)
                ov[k, i] += s - half
                ov[k - 1, i] += -s - half
    return out


def soft_vjp_c(x, c, double P, upstream):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef const double[::1] uv = np.ascontiguousarray(upstream, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = cv.shape[0], i, k
    cdef double s, half
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[0] += uv[i]
            for k in range(1, m):
                s = _sigmoid(P * (xv[i] - 0.5 * (cv[k] + cv[k - 1])))
                half = 0.5 * P * (cv[k] - cv[k - 1]) * s * (1.0 - s)
                ov[k] += (s - half) * uv[i]
                ov[k - 1] += (-s - half) * uv[i]
    return out
