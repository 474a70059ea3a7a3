# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels: masked softmax and RMS normalization."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, sqrt

cnp.import_array()


cdef inline floating _exp(floating v) noexcept nogil:
    if floating is float:
        return expf(v)
    else:
        return exp(v)


def masked_softmax_rows(const floating[:, :, ::1] scores, const unsigned char[:, ::1] banned,
                        floating[:, :, ::1] out):
    cdef Py_ssize_t R = scores.shape[0], Q = scores.shape[1], K = scores.shape[2]
    cdef Py_ssize_t r, i, j
    cdef floating m, e
    cdef double s
    cdef bint seen
    for i in range(Q):
        seen = False
        for j in range(K):
            if not banned[i, j]:
                seen = True
                break
        if not seen:
            raise ValueError(f"query row {i} has no permitted key")
    with nogil:
        for r in range(R):
            for i in range(Q):
                seen = False
                m = 0
                for j in range(K):
                    if not banned[i, j]:
                        if not seen or scores[r, i, j] > m:
                            m = scores[r, i, j]
                            seen = True
                s = 0.0
                for j in range(K):
                    if banned[i, j]:
                        out[r, i, j] = 0
                    else:
                        e = _exp(scores[r, i, j] - m)
                        out[r, i, j] = e
                        s += e
                for j in range(K):
                    if not banned[i, j]:
                        out[r, i, j] = <floating>(out[r, i, j] / s)


def rms_norm_rows(const floating[:, ::1] x, const floating[::1] gain, double eps,
                  floating[:, ::1] out, floating[::1] inv_rms):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double acc, inv
    with nogil:
        for r in range(R):
            acc = 0.0
            for j in range(D):
                acc += x[r, j] * x[r, j]
            inv = 1.0 / sqrt(acc / D + eps)
            inv_rms[r] = <floating>inv
            for j in range(D):
                out[r, j] = <floating>(x[r, j] * inv * gain[j])
