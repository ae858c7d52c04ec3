"""NumPy kernel backend.

Shape conventions (shared with the compiled backend):

    conv2d:    x (B, Ci, H, W)   w (Co, Ci, kh, kw)   b (Co,)  ->  (B, Co, Ho, Wo)
    conv1d:    x (B, N, Ci)      w (Co, Ci, k)        b (Co,)  ->  (B, N, Co)
    maxpool:   x (B, C, H, W)    window (kh, kw), non-overlapping
    rowmm:     a (N, M) @ b (M, C)

The 1-D convolution is causal: output position n sees inputs n-k+1 .. n, with
zeros outside the left edge; weight tap t corresponds to input offset
n-(k-1)+t, i.e. taps are ordered oldest to newest.

Forward rowmm and conv1d_fwd are *row-stable*: the bits of output row n depend
only on the inputs that feed row n, never on how many other rows are computed
in the same call.  (Plain BLAS matmul does not have this property; einsum
without optimization does.)  The decoder's forward pass relies on this to make
incremental decoding bit-identical to full-sequence scoring.  Backward kernels
carry no such promise and use the fastest available path.

Kernels assume validated inputs; shape errors are raised by the callers.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def rowmm(a, b):
    """Row-stable matrix multiply: out[n] bits depend only on a[n] and b."""
    return np.einsum("nm,mc->nc", a, b, optimize=False)


# ---------------------------------------------------------------- conv2d

def _im2col(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    B, Ci, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Ci * kh * kw)
    return cols, Ho, Wo


def conv2d_fwd(x, w, b, stride=1, pad=0):
    B = x.shape[0]
    Co, Ci, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(Co, Ci * kh * kw).T
    if b is not None:
        y += b
    return np.ascontiguousarray(y.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2))


def conv2d_bwd(x, w, stride, pad, gy):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    cols, Ho, Wo = _im2col(x, kh, kw, stride, pad)
    g = gy.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
    gw = (g.T @ cols).reshape(w.shape)
    gb = g.sum(axis=0)
    gcols = (g @ w.reshape(Co, -1)).reshape(B, Ho, Wo, Ci, kh, kw)
    gcols = gcols.transpose(0, 3, 1, 2, 4, 5)  # (B, Ci, Ho, Wo, kh, kw)
    Hp, Wp = H + 2 * pad, W + 2 * pad
    gxp = np.zeros((B, Ci, Hp, Wp), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += gcols[:, :, :, :, i, j]
    gx = gxp[:, :, pad : Hp - pad, pad : Wp - pad] if pad else gxp
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb


# ---------------------------------------------------------------- conv1d (causal)

def _causal_rows(x, k):
    B, N, Ci = x.shape
    xp = np.pad(x, ((0, 0), (k - 1, 0), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)          # (B, N, Ci, k)
    return win.transpose(0, 1, 3, 2).reshape(B * N, k * Ci)


def conv1d_fwd(x, w, b):
    B, N, Ci = x.shape
    Co, _, k = w.shape
    rows = _causal_rows(x, k)
    wmat = np.ascontiguousarray(w.transpose(2, 1, 0).reshape(k * Ci, Co))
    y = rowmm(rows, wmat)  # zero-padded taps contribute exact zeros
    y += b
    return y.reshape(B, N, Co)


def conv1d_bwd(x, w, gy):
    B, N, Ci = x.shape
    Co, _, k = w.shape
    rows = _causal_rows(x, k)
    g = gy.reshape(B * N, Co)
    gw = np.ascontiguousarray((g.T @ rows).reshape(Co, k, Ci).transpose(0, 2, 1))
    gb = g.sum(axis=0)
    wmat = w.transpose(2, 1, 0).reshape(k * Ci, Co)
    grows = (g @ wmat.T).reshape(B, N, k, Ci)
    gxp = np.zeros((B, N + k - 1, Ci), dtype=x.dtype)
    for t in range(k):
        gxp[:, t : t + N, :] += grows[:, :, t, :]
    return np.ascontiguousarray(gxp[:, k - 1 :, :]), gw, gb


# ---------------------------------------------------------------- maxpool

def maxpool2d_fwd(x, kh, kw):
    B, C, H, W = x.shape
    Ho, Wo = H // kh, W // kw
    t = x.reshape(B, C, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 3, 5)
    t = np.ascontiguousarray(t).reshape(B, C, Ho, Wo, kh * kw)
    idx = t.argmax(axis=-1).astype(np.int64)  # ties: first in row-major window order
    y = np.take_along_axis(t, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2d_bwd(x_shape, kh, kw, idx, gy):
    B, C, H, W = x_shape
    Ho, Wo = H // kh, W // kw
    gt = np.zeros((B, C, Ho, Wo, kh * kw), dtype=gy.dtype)
    np.put_along_axis(gt, idx[..., None], gy[..., None], axis=-1)
    gx = gt.reshape(B, C, Ho, Wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
    return np.ascontiguousarray(gx)
