# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core: squared RBF / cosine Gram blocks.

Sums run sequentially over the feature axis, so any entry is reproduced
exactly by a 1x1 call with the same rows.
"""
import numpy as np

from libc.math cimport exp

NAME = "cython"


cdef void _sqdist(const double[:, ::1] X, const double[:, ::1] Y,
                  double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t m = X.shape[0], mp = Y.shape[0], n = X.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, d
    for i in range(m):
        for j in range(mp):
            acc = 0.0
            for k in range(n):
                d = X[i, k] - Y[j, k]
                acc = acc + d * d
            out[i, j] = acc


def sqdist(const double[:, ::1] X, const double[:, ::1] Y):
    out = np.empty((X.shape[0], Y.shape[0]))
    cdef double[:, ::1] o = out
    with nogil:
        _sqdist(X, Y, o)
    return out


def rbf_gram_sq(const double[:, ::1] X, const double[:, ::1] Y,
                double sigma, bint return_dist=False):
    cdef Py_ssize_t m = X.shape[0], mp = Y.shape[0]
    cdef Py_ssize_t i, j
    cdef double inv = 1.0 / (sigma * sigma)
    d2 = np.empty((m, mp))
    kk = np.empty((m, mp))
    cdef double[:, ::1] dv = d2
    cdef double[:, ::1] kv = kk
    with nogil:
        _sqdist(X, Y, dv)
        for i in range(m):
            for j in range(mp):
                kv[i, j] = exp(-(dv[i, j] * inv))
    if return_dist:
        return kk, d2
    return kk


def cos_gram_sq(const double[:, ::1] X, const double[:, ::1] Y):
    cdef Py_ssize_t m = X.shape[0], mp = Y.shape[0], n = X.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    out = np.empty((m, mp))
    nx = np.empty(m)
    ny = np.empty(mp)
    cdef double[:, ::1] o = out
    cdef double[::1] nxv = nx
    cdef double[::1] nyv = ny
    with nogil:
        for i in range(m):
            acc = 0.0
            for k in range(n):
                acc = acc + X[i, k] * X[i, k]
            nxv[i] = acc
        for j in range(mp):
            acc = 0.0
            for k in range(n):
                acc = acc + Y[j, k] * Y[j, k]
            nyv[j] = acc
        for i in range(m):
            for j in range(mp):
                acc = 0.0
                for k in range(n):
                    acc = acc + X[i, k] * Y[j, k]
                o[i, j] = (acc * acc) / (nxv[i] * nyv[j])
    return out
