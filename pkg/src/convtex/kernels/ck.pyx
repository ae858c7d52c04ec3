# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Same contracts as the NumPy backend (see pyk.py), in particular row-stability
of rowmm and conv1d_fwd: those use fixed-order scalar accumulation loops, so
each output row's bits never depend on how many rows are computed.  conv2d
goes through im2col plus a BLAS matmul borrowed from SciPy.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm


# ---------------------------------------------------------------- gemm helper

cdef void _gemm(floating[:, ::1] a, floating[:, ::1] b, floating[:, ::1] c) noexcept nogil:
    """c (m,n) = a (m,k) @ b (k,n), all C-ordered.

    BLAS is column-major, so compute c^T = b^T @ a^T by handing the buffers
    over in swapped order with swapped leading dimensions.
    """
    cdef char tn = b'N'
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef float sone = 1.0, szero = 0.0
    cdef double done = 1.0, dzero = 0.0
    if m == 0 or n == 0 or k == 0:
        return
    if floating is float:
        sgemm(&tn, &tn, &n, &m, &k, &sone, &b[0, 0], &n, &a[0, 0], &k, &szero, &c[0, 0], &n)
    else:
        dgemm(&tn, &tn, &n, &m, &k, &done, &b[0, 0], &n, &a[0, 0], &k, &dzero, &c[0, 0], &n)


# ---------------------------------------------------------------- rowmm

def rowmm(a, b):
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    _rowmm_impl(a, b, out)
    return out


def _rowmm_impl(floating[:, ::1] a, floating[:, ::1] b, floating[:, ::1] out):
    cdef Py_ssize_t N = a.shape[0], M = a.shape[1], C = b.shape[1]
    cdef Py_ssize_t n, m, c
    cdef floating v
    with nogil:
        for n in range(N):
            for m in range(M):
                v = a[n, m]
                for c in range(C):
                    out[n, c] += v * b[m, c]


# ---------------------------------------------------------------- conv2d

def conv2d_fwd(x, w, b, int stride=1, int pad=0):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    cols = np.empty((B * Ho * Wo, Ci * kh * kw), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad, Ho, Wo)
    wmat_t = np.ascontiguousarray(w.reshape(Co, Ci * kh * kw).T)
    y = np.empty((B * Ho * Wo, Co), dtype=x.dtype)
    _gemm_driver(cols, wmat_t, y)
    if b is not None:
        y += b
    return np.ascontiguousarray(y.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))


def conv2d_bwd(x, w, int stride, int pad, gy):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    gy = np.ascontiguousarray(gy)
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = gy.shape[2], Wo = gy.shape[3]
    cols = np.empty((B * Ho * Wo, Ci * kh * kw), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad, Ho, Wo)
    g = np.ascontiguousarray(gy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co))
    gt = np.ascontiguousarray(g.T)
    gw = np.empty((Co, Ci * kh * kw), dtype=x.dtype)
    _gemm_driver(gt, cols, gw)
    gb = g.sum(axis=0)
    wmat = np.ascontiguousarray(w.reshape(Co, Ci * kh * kw))
    gcols = np.empty((B * Ho * Wo, Ci * kh * kw), dtype=x.dtype)
    _gemm_driver(g, wmat, gcols)
    gx = np.zeros_like(x)
    _col2im(gcols, gx, kh, kw, stride, pad, Ho, Wo)
    return gx, gw.reshape(Co, Ci, kh, kw), gb


def _gemm_driver(floating[:, ::1] a, floating[:, ::1] b, floating[:, ::1] c):
    with nogil:
        _gemm(a, b, c)


def _im2col(floating[:, :, :, ::1] x, floating[:, ::1] cols,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad,
            Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t B = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, ci, ho, wo, i, j, hi, wi, r, col
    with nogil:
        for b in range(B):
            for ho in range(Ho):
                for wo in range(Wo):
                    r = (b * Ho + ho) * Wo + wo
                    col = 0
                    for ci in range(Ci):
                        for i in range(kh):
                            hi = ho * stride - pad + i
                            for j in range(kw):
                                wi = wo * stride - pad + j
                                if 0 <= hi < H and 0 <= wi < W:
                                    cols[r, col] = x[b, ci, hi, wi]
                                else:
                                    cols[r, col] = 0
                                col += 1


def _col2im(floating[:, ::1] gcols, floating[:, :, :, ::1] gx,
            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad,
            Py_ssize_t Ho, Py_ssize_t Wo):
    cdef Py_ssize_t B = gx.shape[0], Ci = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t b, ci, ho, wo, i, j, hi, wi, r, col
    with nogil:
        for b in range(B):
            for ho in range(Ho):
                for wo in range(Wo):
                    r = (b * Ho + ho) * Wo + wo
                    col = 0
                    for ci in range(Ci):
                        for i in range(kh):
                            hi = ho * stride - pad + i
                            for j in range(kw):
                                wi = wo * stride - pad + j
                                if 0 <= hi < H and 0 <= wi < W:
                                    gx[b, ci, hi, wi] += gcols[r, col]
                                col += 1


# ---------------------------------------------------------------- conv1d (causal)

def conv1d_fwd(x, w, b):
    x = np.ascontiguousarray(x)
    # wmat[t, ci, co] puts the output channel last so the inner loop is a saxpy
    wmat = np.ascontiguousarray(np.asarray(w).transpose(2, 1, 0))
    b = np.ascontiguousarray(b)
    out = np.empty((x.shape[0], x.shape[1], w.shape[0]), dtype=x.dtype)
    _conv1d_fwd_impl(x, wmat, b, out)
    return out


def _conv1d_fwd_impl(floating[:, :, ::1] x, floating[:, :, ::1] wmat,
                     floating[::1] bias, floating[:, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], Ci = x.shape[2]
    cdef Py_ssize_t k = wmat.shape[0], Co = wmat.shape[2]
    cdef Py_ssize_t b, n, t, ci, co, pos
    cdef floating v
    with nogil:
        for b in range(B):
            for n in range(N):
                for co in range(Co):
                    out[b, n, co] = bias[co]
                for t in range(k):
                    pos = n - (k - 1) + t
                    if pos < 0:
                        continue
                    for ci in range(Ci):
                        v = x[b, pos, ci]
                        for co in range(Co):
                            out[b, n, co] += v * wmat[t, ci, co]


def conv1d_bwd(x, w, gy):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    gy = np.ascontiguousarray(gy)
    wmat = np.ascontiguousarray(np.asarray(w).transpose(2, 1, 0))
    gx = np.zeros_like(x)
    gwmat = np.zeros_like(wmat)
    gb = np.zeros(w.shape[0], dtype=x.dtype)
    _conv1d_bwd_impl(x, wmat, gy, gx, gwmat, gb)
    return gx, np.ascontiguousarray(gwmat.transpose(2, 1, 0)), gb


def _conv1d_bwd_impl(floating[:, :, ::1] x, floating[:, :, ::1] wmat, floating[:, :, ::1] gy,
                     floating[:, :, ::1] gx, floating[:, :, ::1] gwmat, floating[::1] gb):
    cdef Py_ssize_t B = x.shape[0], N = x.shape[1], Ci = x.shape[2]
    cdef Py_ssize_t k = wmat.shape[0], Co = wmat.shape[2]
    cdef Py_ssize_t b, n, t, ci, co, pos
    cdef floating v, acc, g
    with nogil:
        for b in range(B):
            for n in range(N):
                for co in range(Co):
                    gb[co] += gy[b, n, co]
                for t in range(k):
                    pos = n - (k - 1) + t
                    if pos < 0:
                        continue
                    for ci in range(Ci):
                        v = x[b, pos, ci]
                        acc = 0
                        for co in range(Co):
                            g = gy[b, n, co]
                            gwmat[t, ci, co] += v * g
                            acc += g * wmat[t, ci, co]
                        gx[b, pos, ci] += acc


# ---------------------------------------------------------------- maxpool

def maxpool2d_fwd(x, Py_ssize_t kh, Py_ssize_t kw):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    y = np.empty((B, C, H // kh, W // kw), dtype=x.dtype)
    idx = np.empty((B, C, H // kh, W // kw), dtype=np.int64)
    _maxpool_fwd_impl(x, kh, kw, y, idx)
    return y, idx


def _maxpool_fwd_impl(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
                      floating[:, :, :, ::1] y, cnp.int64_t[:, :, :, ::1] idx):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = y.shape[2], Wo = y.shape[3]
    cdef Py_ssize_t b, c, ho, wo, i, j, p, bi
    cdef floating best, v
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        best = x[b, c, ho * kh, wo * kw]
                        bi = 0
                        p = 0
                        for i in range(kh):
                            for j in range(kw):
                                v = x[b, c, ho * kh + i, wo * kw + j]
                                if v > best:  # strict: ties keep the earliest
                                    best = v
                                    bi = p
                                p += 1
                        y[b, c, ho, wo] = best
                        idx[b, c, ho, wo] = bi


def maxpool2d_bwd(x_shape, Py_ssize_t kh, Py_ssize_t kw, idx, gy):
    gy = np.ascontiguousarray(gy)
    gx = np.zeros(tuple(x_shape), dtype=gy.dtype)
    _maxpool_bwd_impl(gx, kh, kw, np.ascontiguousarray(idx), gy)
    return gx


def _maxpool_bwd_impl(floating[:, :, :, ::1] gx, Py_ssize_t kh, Py_ssize_t kw,
                      cnp.int64_t[:, :, :, ::1] idx, floating[:, :, :, ::1] gy):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]
    cdef Py_ssize_t b, c, ho, wo, p
    with nogil:
        for b in range(B):
            for c in range(C):
                for ho in range(Ho):
                    for wo in range(Wo):
                        p = idx[b, c, ho, wo]
                        gx[b, c, ho * kh + p // kw, wo * kw + p % kw] += gy[b, c, ho, wo]
