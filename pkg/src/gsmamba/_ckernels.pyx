# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops. Same signatures as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

NAME = "cython"


cdef inline Py_ssize_t _clamp(Py_ssize_t x, Py_ssize_t hi) noexcept nogil:
    if x < 0:
        return 0
    if x > hi:
        return hi
    return x


def slot_index(Py_ssize_t height, Py_ssize_t width, Py_ssize_t radius):
    cdef Py_ssize_t side = 2 * radius + 1
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.empty((height * width, side * side), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef Py_ssize_t i, j, dr, dc, s
    for i in range(height):
        for j in range(width):
            s = 0
            for dr in range(-radius, radius + 1):
                for dc in range(-radius, radius + 1):
                    o[i * width + j, s] = _clamp(i + dr, height - 1) * width + _clamp(j + dc, width - 1)
                    s += 1
    return out


def scan_states(const double[:, :, ::1] abar, const double[:, :, ::1] bu):
    cdef Py_ssize_t L = abar.shape[0], D = abar.shape[1], N = abar.shape[2]
    out = np.empty((L, D, N), dtype=np.float64)
    cdef double[:, :, ::1] h = out
    cdef Py_ssize_t t, d, n
    with nogil:
        if L > 0:
            for d in range(D):
                for n in range(N):
                    h[0, d, n] = abar[0, d, n] * 0.0 + bu[0, d, n]
        for t in range(1, L):
            for d in range(D):
                for n in range(N):
                    h[t, d, n] = abar[t, d, n] * h[t - 1, d, n] + bu[t, d, n]
    return out


def scan_fused(const double[:, ::1] u, const double[:, ::1] delta,
               const double[:, ::1] A, const double[:, ::1] b, const double[:, ::1] c):
    cdef Py_ssize_t L = u.shape[0], D = u.shape[1], N = A.shape[1]
    out = np.empty((L, D), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] h = np.zeros((D, N), dtype=np.float64)
    cdef Py_ssize_t t, d, n
    cdef double dt, acc
    with nogil:
        for t in range(L):
            for d in range(D):
                dt = delta[t, d]
                acc = 0.0
                for n in range(N):
                    h[d, n] = exp(dt * A[d, n]) * h[d, n] + (dt * b[t, n]) * u[t, d]
                    acc = acc + h[d, n] * c[t, n]
                y[t, d] = acc
    return out


def window_scores(const double[:, :, ::1] q, const double[:, :, ::1] k, bias,
                  Py_ssize_t height, Py_ssize_t width, Py_ssize_t radius, double scale):
    cdef Py_ssize_t L = q.shape[0], heads = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t side = 2 * radius + 1, S = side * side
    cdef bint has_bias = bias is not None
    cdef const double[::1] bv
    if has_bias:
        bv = np.ascontiguousarray(bias, dtype=np.float64)
    else:
        bv = np.zeros(S, dtype=np.float64)
    out = np.empty((heads, L, S), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t i, j, dr, dc, s, h, e, tok, src
    cdef double acc
    with nogil:
        for i in range(height):
            for j in range(width):
                tok = i * width + j
                s = 0
                for dr in range(-radius, radius + 1):
                    for dc in range(-radius, radius + 1):
                        src = _clamp(i + dr, height - 1) * width + _clamp(j + dc, width - 1)
                        for h in range(heads):
                            acc = 0.0
                            for e in range(dh):
                                acc = acc + q[tok, h, e] * k[src, h, e]
                            if has_bias:
                                o[h, tok, s] = acc * scale + bv[s]
                            else:
                                o[h, tok, s] = acc * scale
                        s += 1
    return out


def window_aggregate(const double[:, :, ::1] alpha, const double[:, :, ::1] v,
                     Py_ssize_t height, Py_ssize_t width, Py_ssize_t radius):
    cdef Py_ssize_t heads = alpha.shape[0], L = alpha.shape[1], S = alpha.shape[2]
    cdef Py_ssize_t dvh = v.shape[2]
    out = np.zeros((L, heads, dvh), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t i, j, dr, dc, s, h, e, tok, src
    cdef double w
    with nogil:
        for i in range(height):
            for j in range(width):
                tok = i * width + j
                s = 0
                for dr in range(-radius, radius + 1):
                    for dc in range(-radius, radius + 1):
                        src = _clamp(i + dr, height - 1) * width + _clamp(j + dc, width - 1)
                        for h in range(heads):
                            w = alpha[h, tok, s]
                            for e in range(dvh):
                                o[tok, h, e] = o[tok, h, e] + w * v[src, h, e]
                        s += 1
    return out
