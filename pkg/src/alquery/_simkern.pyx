# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pairwise matching-similarity kernels.

Same flat pool layout and semantics as the numpy fallbacks in
``alquery._kernels``: strict upper triangle filled and mirrored, diagonal
left at zero for the caller.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def ccms_matrix(const double[:, ::1] feats,
                const int[::1] classes,
                const double[::1] scores,
                const long long[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t d = feats.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t max_m = 0
    cdef Py_ssize_t i, j, u, v, k, a0, a1, b0, b1
    for i in range(n):
        if offsets[i + 1] - offsets[i] > max_m:
            max_m = offsets[i + 1] - offsets[i]
    if max_m == 0:
        return out_arr
    cdef double[::1] best_b = np.empty(max_m, dtype=np.float64)

    cdef double cos, val, best_u, acc_a, den_a, acc_b, den_b, s_ab, s_ba
    cdef int cu
    for i in range(n):
        a0 = offsets[i]
        a1 = offsets[i + 1]
        if a0 == a1:
            continue
        for j in range(i + 1, n):
            b0 = offsets[j]
            b1 = offsets[j + 1]
            if b0 == b1:
                continue
            for v in range(b1 - b0):
                best_b[v] = 0.0
            acc_a = 0.0
            den_a = 0.0
            for u in range(a0, a1):
                cu = classes[u]
                best_u = 0.0
                for v in range(b0, b1):
                    if classes[v] == cu:
                        cos = 0.0
                        for k in range(d):
                            cos += feats[u, k] * feats[v, k]
                        val = cos + 1.0
                        if val > best_u:
                            best_u = val
                        if val > best_b[v - b0]:
                            best_b[v - b0] = val
                acc_a += scores[u] * best_u
                den_a += scores[u]
            acc_b = 0.0
            den_b = 0.0
            for v in range(b0, b1):
                acc_b += scores[v] * best_b[v - b0]
                den_b += scores[v]
            s_ab = acc_a / den_a if den_a > 0.0 else 0.0
            s_ba = acc_b / den_b if den_b > 0.0 else 0.0
            # unit-norm dots can overshoot 1 by an ulp; keep the [0, 2] range
            if s_ab > 2.0:
                s_ab = 2.0
            if s_ba > 2.0:
                s_ba = 2.0
            val = 0.5 * (s_ab + s_ba)
            out[i, j] = val
            out[j, i] = val
    return out_arr


def kl_matrix(const double[:, ::1] probs,
              const double[:, ::1] logs,
              const int[::1] classes,
              const double[::1] scores,
              const long long[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t width = probs.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t max_m = 0
    cdef Py_ssize_t i, j, u, v, k, a0, a1, b0, b1
    for i in range(n):
        if offsets[i + 1] - offsets[i] > max_m:
            max_m = offsets[i + 1] - offsets[i]
    if max_m == 0:
        return out_arr
    cdef double[::1] best_b = np.empty(max_m, dtype=np.float64)

    cdef double kl_sym, val, best_u, acc_a, den_a, acc_b, den_b, s_ab, s_ba
    cdef int cu
    for i in range(n):
        a0 = offsets[i]
        a1 = offsets[i + 1]
        if a0 == a1:
            continue
        for j in range(i + 1, n):
            b0 = offsets[j]
            b1 = offsets[j + 1]
            if b0 == b1:
                continue
            for v in range(b1 - b0):
                best_b[v] = 0.0
            acc_a = 0.0
            den_a = 0.0
            for u in range(a0, a1):
                cu = classes[u]
                best_u = 0.0
                for v in range(b0, b1):
                    if classes[v] == cu:
                        kl_sym = 0.0
                        for k in range(width):
                            kl_sym += (probs[u, k] - probs[v, k]) * (logs[u, k] - logs[v, k])
                        val = exp(-0.5 * kl_sym)
                        if val > best_u:
                            best_u = val
                        if val > best_b[v - b0]:
                            best_b[v - b0] = val
                acc_a += scores[u] * best_u
                den_a += scores[u]
            acc_b = 0.0
            den_b = 0.0
            for v in range(b0, b1):
                acc_b += scores[v] * best_b[v - b0]
                den_b += scores[v]
            s_ab = acc_a / den_a if den_a > 0.0 else 0.0
            s_ba = acc_b / den_b if den_b > 0.0 else 0.0
            # exp(-kl) tops out at 1; guard against a negative-ulp kl_sym
            if s_ab > 1.0:
                s_ab = 1.0
            if s_ba > 1.0:
                s_ba = 1.0
            val = 0.5 * (s_ab + s_ba)
            out[i, j] = val
            out[j, i] = val
    return out_arr
