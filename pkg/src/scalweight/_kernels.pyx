# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gradient-combination kernels.

Same contracts as :mod:`scalweight._kernels_py`; inputs are C-contiguous
float64 arrays of shape (T, P).
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline double _dot(const double[:, ::1] a, Py_ssize_t i, const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t k, P = a.shape[1]
    cdef double s = 0.0
    for k in range(P):
        s += a[i, k] * b[j, k]
    return s


def gram(const double[:, ::1] grads):
    # a BLAS matrix product beats any hand loop here, so defer to numpy
    a = np.asarray(grads)
    return a @ a.T


def pcgrad_project(const double[:, ::1] grads, const long[:, ::1] order):
    """Project each row away from the other rows it conflicts with.

    ``order[i]`` lists the other rows in the order they are visited for row
    ``i``.  Conflicts are tested against the partially projected row and the
    original other rows.
    """
    cdef Py_ssize_t T = grads.shape[0], P = grads.shape[1], i, n, j, k
    cdef double d, nj
    out = np.array(grads, copy=True)
    cdef double[:, ::1] o = out
    norms = np.empty(T)
    cdef double[::1] sq = norms
    with nogil:
        for j in range(T):
            sq[j] = _dot(grads, j, grads, j)
        for i in range(T):
            for n in range(order.shape[1]):
                j = order[i, n]
                d = 0.0
                for k in range(P):
                    d += o[i, k] * grads[j, k]
                if d < 0.0 and sq[j] > 0.0:
                    nj = d / sq[j]
                    for k in range(P):
                        o[i, k] -= nj * grads[j, k]
    return out


def graddrop(const double[:, ::1] grads, const double[::1] u):
    """Sign-consistent masked sum; ``u`` holds one uniform draw per coordinate."""
    cdef Py_ssize_t T = grads.shape[0], P = grads.shape[1], t, k
    cdef double pos, neg, absum, g, keep
    out = np.empty(P)
    cdef double[::1] o = out
    with nogil:
        for k in range(P):
            pos = 0.0
            neg = 0.0
            absum = 0.0
            for t in range(T):
                g = grads[t, k]
                absum += fabs(g)
                if g > 0.0:
                    pos += g
                else:
                    neg += g
            if absum > 0.0:
                keep = 0.5 * (1.0 + (pos + neg) / absum)
            else:
                keep = 0.5
            o[k] = pos if u[k] < keep else neg
    return out
