# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the routing and neighborhood kernels."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def topk_select(logits, Py_ssize_t k):
    cdef cnp.float64_t[:, ::1] L = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = L.shape[0], m = L.shape[1]
    if k < 1 or k > m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    out_arr = np.empty((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef cnp.uint8_t[::1] taken = np.zeros(m, dtype=np.uint8)
    cdef Py_ssize_t i, j, r, best, a, b
    cdef double bv
    cdef cnp.int64_t tmp
    with nogil:
        for i in range(n):
            for j in range(m):
                taken[j] = 0
            for r in range(k):
                best = -1
                bv = 0.0
                for j in range(m):
                    # strict > keeps the lowest index among equal maxima
                    if not taken[j] and (best < 0 or L[i, j] > bv):
                        best = j
                        bv = L[i, j]
                taken[best] = 1
                out[i, r] = best
            # insertion sort, k is small
            for a in range(1, k):
                tmp = out[i, a]
                b = a - 1
                while b >= 0 and out[i, b] > tmp:
                    out[i, b + 1] = out[i, b]
                    b -= 1
                out[i, b + 1] = tmp
    return out_arr


def knn_descriptors(points, Py_ssize_t k):
    cdef cnp.float64_t[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    out_arr = np.empty((n, 9), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef cnp.float64_t[::1] bd = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[::1] bi = np.empty(k, dtype=np.int64)
    cdef Py_ssize_t i, j, c, cnt, pos
    cdef double dx, dy, dz, d2, o
    cdef double acc[3]
    cdef double mean[3]
    cdef double sq[3]
    with nogil:
        for i in range(n):
            cnt = 0
            for j in range(n):
                if j == i:
                    continue
                dx = P[j, 0] - P[i, 0]
                dy = P[j, 1] - P[i, 1]
                dz = P[j, 2] - P[i, 2]
                d2 = dx * dx + dy * dy + dz * dz
                # j ascends, so an equal distance never displaces an earlier index
                if cnt < k:
                    pos = cnt
                    cnt += 1
                elif d2 < bd[k - 1]:
                    pos = k - 1
                else:
                    continue
                while pos > 0 and bd[pos - 1] > d2:
                    bd[pos] = bd[pos - 1]
                    bi[pos] = bi[pos - 1]
                    pos -= 1
                bd[pos] = d2
                bi[pos] = j
            for c in range(3):
                acc[c] = 0.0
            for j in range(k):
                for c in range(3):
                    acc[c] = acc[c] + (P[bi[j], c] - P[i, c])
            for c in range(3):
                mean[c] = acc[c] / k
                sq[c] = 0.0
            for j in range(k):
                for c in range(3):
                    o = (P[bi[j], c] - P[i, c]) - mean[c]
                    sq[c] = sq[c] + o * o
            for c in range(3):
                out[i, c] = P[i, c]
                out[i, 3 + c] = mean[c]
                out[i, 6 + c] = sqrt(sq[c] / k)
    return out_arr



cdef double S2PI = 0.7978845608028654
cdef double GC = 0.044715


def gelu(x):
    # np.tanh is vectorized and much faster than libc tanh; the surrounding
    # arithmetic keeps the operation order of the pure-Python kernel
    cdef cnp.ndarray arr = np.ascontiguousarray(x, dtype=np.float64)
    out_arr = np.empty_like(arr)
    cdef cnp.float64_t[::1] a = arr.reshape(-1)
    cdef cnp.float64_t[::1] o = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double v
    with nogil:
        for i in range(n):
            v = a[i]
            o[i] = S2PI * (v + GC * (v * v * v))
    np.tanh(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            o[i] = (0.5 * a[i]) * (1.0 + o[i])
    return out_arr


def gelu_backward(x, dy):
    cdef cnp.ndarray arr = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray darr = np.ascontiguousarray(dy, dtype=np.float64)
    if darr.shape[0] != arr.shape[0] or darr.size != arr.size:
        raise ValueError("gelu_backward: shape mismatch")
    out_arr = np.empty_like(arr)
    cdef cnp.float64_t[::1] a = arr.reshape(-1)
    cdef cnp.float64_t[::1] d = darr.reshape(-1)
    cdef cnp.float64_t[::1] o = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = a.shape[0]
    cdef double v, v2, t, du
    with nogil:
        for i in range(n):
            v = a[i]
            o[i] = S2PI * (v + GC * ((v * v) * v))
    np.tanh(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            v = a[i]
            v2 = v * v
            t = o[i]
            du = S2PI * (1.0 + (3.0 * GC) * v2)
            o[i] = d[i] * (0.5 * (1.0 + t) + ((0.5 * v) * (1.0 - t * t)) * du)
    return out_arr


def adam_step(p, g, m, v, double lr, double beta1, double beta2, double bc1, double bc2,
              double eps, double wd):
    for arr in (p, m, v):
        if not (arr.flags.c_contiguous and arr.dtype == np.float64):
            raise ValueError("adam_step needs C-contiguous float64 state arrays")
    cdef cnp.float64_t[::1] P = p.reshape(-1)
    cdef cnp.float64_t[::1] G = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
    cdef cnp.float64_t[::1] Mo = m.reshape(-1)
    cdef cnp.float64_t[::1] Vo = v.reshape(-1)
    cdef Py_ssize_t i, n = P.shape[0]
    cdef double gi, decay = 1.0 - lr * wd, a1 = 1.0 - beta1, a2 = 1.0 - beta2
    with nogil:
        for i in range(n):
            gi = G[i]
            Mo[i] = Mo[i] * beta1 + a1 * gi
            Vo[i] = Vo[i] * beta2 + a2 * (gi * gi)
            if wd != 0.0:
                P[i] = P[i] * decay
            P[i] = P[i] - lr * (Mo[i] / bc1) / (sqrt(Vo[i] / bc2) + eps)
