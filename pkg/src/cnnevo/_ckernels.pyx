# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops; signatures mirror ``cnnevo._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int k, int s, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c * k * k, ho * wo), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    for b in range(n):
        for ch in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ch * k + ki) * k + kj
                    for i in range(ho):
                        for j in range(wo):
                            cols[b, row, i * wo + j] = x[b, ch, i * s + ki, j * s + kj]
    return out


def col2im(const real[:, :, ::1] cols, int c, int hp, int wp, int k, int s, int ho, int wo):
    cdef Py_ssize_t n = cols.shape[0]
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, ki, kj, i, j, row
    for b in range(n):
        for ch in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ch * k + ki) * k + kj
                    for i in range(ho):
                        for j in range(wo):
                            x[b, ch, i * s + ki, j * s + kj] += cols[b, row, i * wo + j]
    return out


def maxpool_forward(const real[:, :, :, ::1] x, int p, int s):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = (x.shape[2] - p) // s + 1, wo = (x.shape[3] - p) // s + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    arg_arr = np.empty((n, c, ho, wo), dtype=np.int32)
    cdef real[:, :, :, ::1] out = out_arr
    cdef int32_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, i, j, ki, kj
    cdef real best, v
    cdef int32_t besti
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, i * s, j * s]
                    besti = 0
                    for ki in range(p):
                        for kj in range(p):
                            v = x[b, ch, i * s + ki, j * s + kj]
                            if v > best:
                                best = v
                                besti = <int32_t>(ki * p + kj)
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = besti
    return out_arr, arg_arr


def maxpool_backward(const real[:, :, :, ::1] dout, const int32_t[:, :, :, ::1] arg, int h, int w, int p, int s):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, i, j
    cdef int32_t a
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    a = arg[b, ch, i, j]
                    dx[b, ch, i * s + a // p, j * s + a % p] += dout[b, ch, i, j]
    return dx_arr


def fx_matmul(const int32_t[:, ::1] a, const int32_t[:, ::1] bt, int frac_bits, int64_t code_min, int64_t code_max):
    """out[m, n] = sum_k rescale(a[m, k] * bt[n, k]) / 2**frac_bits."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], nn = bt.shape[0]
    out_arr = np.empty((m, nn), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef int64_t prod, q, acc
    cdef int64_t half = (<int64_t>1) << (frac_bits - 1)
    cdef double scale = 1.0 / ((<int64_t>1) << frac_bits)
    for i in range(m):
        for j in range(nn):
            acc = 0
            for t in range(kk):
                prod = <int64_t>a[i, t] * <int64_t>bt[j, t]
                if prod >= 0:
                    q = (prod + half) >> frac_bits
                else:
                    q = -((-prod + half) >> frac_bits)
                if q > code_max:
                    q = code_max
                elif q < code_min:
                    q = code_min
                acc += q
            out[i, j] = acc * scale
    return out_arr
