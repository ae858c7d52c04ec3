"""Shared test machinery: finite differences and nested-loop references.

The reference implementations are deliberately naive — plain Python loops
with no vectorization tricks — so they cannot share a bug with the array
code they check.
"""

import numpy as np

import convtex.tensor as T


def fd_gradient(loss_fn, array, eps=1e-4):
    """Central-difference gradient of loss_fn() w.r.t. array, in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = loss_fn()
        flat[i] = keep - eps
        lo = loss_fn()
        flat[i] = keep
        out[i] = (hi - lo) / (2 * eps)
    return grad


def rel_error(analytic, reference):
    scale = max(float(np.abs(reference).max()), 1e-12)
    return float(np.abs(analytic - reference).max()) / scale


def check_grads(build, arrays, eps=1e-4, tol=1e-5):
    """build(tensors) -> scalar Tensor; FD-check every input's gradient.

    Must run inside use_dtype(float64) with float64 arrays for the pinned
    tolerance to be meaningful.  Returns the worst relative error seen.
    """
    tensors = [T.Tensor(a, requires_grad=True, dtype=a.dtype) for a in arrays]
    with T.record():
        loss = build(*tensors)
        T.backward(loss)

    worst = 0.0
    for t, a in zip(tensors, arrays):
        assert t.grad is not None, "input missing a gradient"

        def value():
            return float(build(*[T.Tensor(x, dtype=x.dtype) for x in arrays]).data)

        fd = fd_gradient(value, a, eps=eps)
        err = rel_error(t.grad, fd)
        assert err < tol, f"gradient off by {err:.3g} (tol {tol})"
        worst = max(worst, err)
    return worst


def projection(shape, rng):
    return rng.standard_normal(shape)


# ------------------------------------------------- nested-loop references

def conv2d_ref(x, w, b, stride=1, pad=0):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.zeros((B, Ci, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    xp[:, :, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    y = np.zeros((B, Co, Ho, Wo), dtype=np.float64)
    for n in range(B):
        for co in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for ci in range(Ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(
                                    xp[n, ci, i * stride + u, j * stride + v]
                                ) * float(w[co, ci, u, v])
                    y[n, co, i, j] = acc + (float(b[co]) if b is not None else 0.0)
    return y


def conv1d_causal_ref(x, w, b):
    # x (B, N, Ci); w (Co, Ci, k) taps oldest -> newest; left-padded with zeros
    B, N, Ci = x.shape
    Co, _, k = w.shape
    y = np.zeros((B, N, Co), dtype=np.float64)
    for n in range(B):
        for t in range(N):
            for co in range(Co):
                acc = 0.0
                for tap in range(k):
                    src = t - (k - 1) + tap
                    if src < 0:
                        continue
                    for ci in range(Ci):
                        acc += float(x[n, src, ci]) * float(w[co, ci, tap])
                y[n, t, co] = acc + float(b[co])
    return y


def maxpool2d_ref(x, kh, kw):
    B, C, H, W = x.shape
    Ho, Wo = H // kh, W // kw
    y = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = -np.inf
                    for u in range(kh):
                        for v in range(kw):
                            val = float(x[n, c, i * kh + u, j * kw + v])
                            if val > best:
                                best = val
                    y[n, c, i, j] = best
    return y


def softmax_ref(row):
    e = np.exp(row - row.max())
    return e / e.sum()


def attention_ref(h, g, V, wd, bd):
    # h, g (N, D); V (S, D) -> content (N, D), weights (N, S)
    N, D = h.shape
    S = V.shape[0]
    content = np.zeros((N, D), dtype=np.float64)
    weights = np.zeros((N, S), dtype=np.float64)
    for i in range(N):
        d = np.zeros(D)
        for a in range(D):
            acc = 0.0
            for c in range(D):
                acc += float(h[i, c]) * float(wd[a, c])
            d[a] = acc + float(bd[a]) + float(g[i, a])
        scores = np.array([float(np.dot(d, V[j])) for j in range(S)])
        weights[i] = softmax_ref(scores)
        for j in range(S):
            content[i] += weights[i, j] * V[j]
    return content, weights


def decoder_block_ref(h_prev, g, V, conv_w, conv_b, wd, bd):
    # one block for a single sequence: h_prev, g (N, D); V (S, D)
    N, D = h_prev.shape
    m = conv1d_causal_ref(h_prev[None], conv_w, conv_b)[0]  # (N, 2D)
    a, bgate = m[:, :D], m[:, D:]
    u = a * (1.0 / (1.0 + np.exp(-bgate)))
    r = u + h_prev
    content, weights = attention_ref(r, g, V, wd, bd)
    return r + content, weights
