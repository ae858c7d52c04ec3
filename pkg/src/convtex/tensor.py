"""Reverse-mode autodiff over NumPy arrays on a linear tape.

Ops executed inside a ``record()`` block append adjoint closures to the active
tape; ``backward(loss)`` replays the tape in reverse and accumulates gradients
into ``.grad``.  Outside ``record()`` the same ops run without any bookkeeping,
which is what inference uses.

Freshly created tensors are cast to float32 by default; gradient checks run
the whole stack in float64 by building the model and its inputs under
``use_dtype(np.float64)``.  Op results keep whatever dtype the inputs carry.

Forward passes that feed autoregressive decoding go through row-stable
primitives (``stable_matmul``, ``conv1d_causal``): the bits of each output
position depend only on the inputs of that position, never on how many
positions are computed in one call.  Backward passes have no such constraint
and use plain BLAS.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ConfigError

_default_dtype = np.float32


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype given to freshly created tensors."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """A NumPy array plus an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        return t

    # -- conveniences -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Parameter:
    """A named leaf tensor updated by the optimizer."""

    __slots__ = ("name", "value")

    def __init__(self, name, data):
        self.name = name
        self.value = Tensor(data, requires_grad=True)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


class Tape:
    """Ordered record of primitive ops, replayed in reverse by backward()."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)


_active: Tape | None = None


@contextlib.contextmanager
def record():
    """Activate a fresh tape.  Nested blocks shadow the outer tape."""
    global _active
    prev = _active
    tape = Tape()
    _active = tape
    try:
        yield tape
    finally:
        _active = prev


def _make(arr, inputs, bk):
    """Wrap an op result, recording its adjoint if a tape is active."""
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, rg)
    if rg and _active is not None:
        _active._nodes.append((out, bk))
    return out


def backward(loss):
    """Accumulate d(loss)/d(tensor) into .grad for everything on the tape.

    Each call adds one full gradient, so repeated calls without zeroing sum
    their results.  Requires an active record() block and a scalar loss.
    """
    if _active is None:
        raise RuntimeError("backward() needs an active record() block")
    if loss.data.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
    sweep: dict[int, list] = {id(loss): [loss, np.ones((), dtype=loss.data.dtype)]}

    def acc(t, g):
        if not t.requires_grad:
            return
        e = sweep.get(id(t))
        if e is None:
            sweep[id(t)] = [t, g]
        else:
            e[1] = e[1] + g  # fresh array: closures must not see mutation

    for out, bk in reversed(_active._nodes):
        e = sweep.get(id(out))
        if e is not None:
            bk(e[1], acc)
    for t, g in sweep.values():
        g = np.ascontiguousarray(g)
        t.grad = g if t.grad is None else t.grad + g


def sgd_step(params, lr):
    """In-place vanilla SGD update; zeroes every gradient afterwards."""
    params = list(params)
    for p in params:
        if p.value.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient; run backward() first")
    for p in params:
        p.value.data -= np.asarray(lr, dtype=p.value.data.dtype) * p.value.grad
        p.value.grad = None


def zero_grads(params):
    for p in params:
        p.value.grad = None


# ---------------------------------------------------------------- helpers

def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bk(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bk)


def sub(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bk(g, acc):
        acc(a, _unbroadcast(g, a.data.shape))
        acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bk)


def mul(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    out = a.data * b.data

    def bk(g, acc):
        acc(a, _unbroadcast(g * b.data, a.data.shape))
        acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bk)


def relu(x):
    out = np.maximum(x.data, 0)

    def bk(g, acc):
        acc(x, g * (x.data > 0))

    return _make(out, (x,), bk)


def sigmoid(x):
    out = expit(x.data)

    def bk(g, acc):
        acc(x, g * out * (1 - out))

    return _make(out, (x,), bk)


def softmax(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bk(g, acc):
        acc(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bk)


def glu(x, axis=0):
    """Gated linear unit: split in half along `axis`, a * sigmoid(b)."""
    extent = x.data.shape[axis]
    if extent % 2:
        raise ValueError(f"glu needs an even extent along axis {axis}, got {extent}")
    half = extent // 2
    return mul(narrow(x, axis, 0, half), sigmoid(narrow(x, axis, half, half)))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    out = x.data.reshape(shape)

    def bk(g, acc):
        acc(x, g.reshape(x.data.shape))

    return _make(out, (x,), bk)


def transpose(x, axes):
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bk(g, acc):
        acc(x, np.transpose(g, inv))

    return _make(out, (x,), bk)


def narrow(x, axis, start, length):
    """Slice [start, start+length) along one axis."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = x.data[sl]

    def bk(g, acc):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        acc(x, gx)

    return _make(out, (x,), bk)


def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bk(g, acc):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        acc(x, np.broadcast_to(gg, x.data.shape))

    return _make(out, (x,), bk)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- matmuls

def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        out = ad @ bd

        def bk(g, acc):
            acc(a, g @ bd.T)
            acc(b, ad.T @ g)

    elif ad.ndim == 3 and bd.ndim == 3:
        out = np.matmul(ad, bd)

        def bk(g, acc):
            acc(a, np.matmul(g, bd.swapaxes(1, 2)))
            acc(b, np.matmul(ad.swapaxes(1, 2), g))

    elif ad.ndim == 3 and bd.ndim == 2:
        out = ad @ bd

        def bk(g, acc):
            acc(a, g @ bd.T)
            acc(b, ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    else:
        raise ValueError(f"matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    return _make(out, (a, b), bk)


def stable_matmul(a, b):
    """matmul whose forward goes through the row-stable kernel.

    Use for every per-position op on the decoding path; see the module
    docstring.  The backward pass is ordinary BLAS.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        out = kernels.rowmm(ad, bd)

        def bk(g, acc):
            acc(a, g @ bd.T)
            acc(b, ad.T @ g)

    elif ad.ndim == 3 and bd.ndim == 2:
        B, N, M = ad.shape
        out = kernels.rowmm(np.ascontiguousarray(ad.reshape(B * N, M)), bd).reshape(B, N, -1)

        def bk(g, acc):
            acc(a, g @ bd.T)
            acc(b, ad.reshape(-1, M).T @ g.reshape(-1, g.shape[-1]))

    elif ad.ndim == 3 and bd.ndim == 3:
        out = np.stack([kernels.rowmm(ad[i], bd[i]) for i in range(ad.shape[0])])

        def bk(g, acc):
            acc(a, np.matmul(g, bd.swapaxes(1, 2)))
            acc(b, np.matmul(ad.swapaxes(1, 2), g))

    else:
        raise ValueError(f"stable_matmul: unsupported ranks {ad.ndim} and {bd.ndim}")
    return _make(out, (a, b), bk)


# ---------------------------------------------------------------- lookups

def embedding_lookup(table, ids):
    """Gather rows of `table` (K, D) by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    K = table.data.shape[0]
    bad = (ids < 0) | (ids >= K)
    if bad.any():
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"token id {int(ids[pos])} at position {pos} outside table of {K} rows")
    out = table.data[ids]

    def bk(g, acc):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        acc(table, gt)

    return _make(out, (table,), bk)


# ---------------------------------------------------------------- convolution & pooling

def _lift(x, target_ndim):
    """View a single sample as a batch of one (recorded, so grads flow)."""
    if x.ndim == target_ndim - 1:
        return reshape(x, (1,) + x.data.shape), True
    return x, False


def conv2d(x, w, b, stride=1, padding=0):
    """2-D convolution over (B, C, H, W) input; 3-D input means one sample."""
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise ValueError(f"conv2d: input rank {x.ndim}, weight rank {w.ndim}")
    x4, lifted = _lift(x, 4)
    Ci = x4.data.shape[1]
    if Ci != w.data.shape[1]:
        raise ConfigError(
            f"conv2d: input has {Ci} channels but weight expects {w.data.shape[1]}"
        )
    kh, kw = w.data.shape[2:]
    H, W = x4.data.shape[2:]
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(f"conv2d: {H}x{W} input too small for {kh}x{kw} kernel")
    xd = np.ascontiguousarray(x4.data)
    out = kernels.conv2d_fwd(xd, w.data, b.data, stride, padding)

    def bk(g, acc):
        gx, gw, gb = kernels.conv2d_bwd(xd, w.data, stride, padding, np.ascontiguousarray(g))
        acc(x4, gx)
        acc(w, gw)
        acc(b, gb)

    y = _make(out, (x4, w, b), bk)
    return reshape(y, y.data.shape[1:]) if lifted else y


def conv1d_causal(x, w, b):
    """Causal 1-D convolution.

    2-D input is one sample shaped (C_in, N) giving (C_out, N); 3-D input is a
    batch shaped (B, N, C_in) giving (B, N, C_out).  Position n sees inputs
    n-k+1 .. n with zeros beyond the left edge, so the output at n never
    depends on later positions.  Forward is row-stable.
    """
    if w.ndim != 3:
        raise ValueError(f"conv1d_causal: weight rank {w.ndim}")
    if x.ndim == 2:
        C, N = x.data.shape
        y = conv1d_causal(reshape(transpose(x, (1, 0)), (1, N, C)), w, b)
        return transpose(reshape(y, (N, w.data.shape[0])), (1, 0))
    if x.ndim != 3:
        raise ValueError(f"conv1d_causal: input rank {x.ndim}")
    Ci = x.data.shape[2]
    if Ci != w.data.shape[1]:
        raise ConfigError(
            f"conv1d_causal: input has {Ci} channels but weight expects {w.data.shape[1]}"
        )
    xd = np.ascontiguousarray(x.data)
    out = kernels.conv1d_fwd(xd, w.data, b.data)

    def bk(g, acc):
        gx, gw, gb = kernels.conv1d_bwd(xd, w.data, np.ascontiguousarray(g))
        acc(x, gx)
        acc(w, gw)
        acc(b, gb)

    return _make(out, (x, w, b), bk)


def maxpool2d(x, kh, kw):
    """Non-overlapping max pool; ties pick the first element in row-major order."""
    if x.ndim not in (3, 4):
        raise ValueError(f"maxpool2d: input rank {x.ndim}")
    x4, lifted = _lift(x, 4)
    H, W = x4.data.shape[2:]
    if H % kh:
        raise ValueError(f"maxpool2d: height {H} not divisible by window {kh}")
    if W % kw:
        raise ValueError(f"maxpool2d: width {W} not divisible by window {kw}")
    xd = np.ascontiguousarray(x4.data)
    out, idx = kernels.maxpool2d_fwd(xd, kh, kw)

    def bk(g, acc):
        acc(x4, kernels.maxpool2d_bwd(xd.shape, kh, kw, idx, np.ascontiguousarray(g)))

    y = _make(out, (x4,), bk)
    return reshape(y, y.data.shape[1:]) if lifted else y


# ---------------------------------------------------------------- loss

def cross_entropy(logits, targets, ignore_id=None):
    """Mean negative log-likelihood over positions whose target is not ignored.

    logits: (N, K) or (B, N, K); targets: matching integer array.  Raises if
    every position is ignored.
    """
    K = logits.data.shape[-1]
    t1 = np.asarray(targets, dtype=np.int64).reshape(-1)
    x2 = logits.data.reshape(-1, K)
    if t1.shape[0] != x2.shape[0]:
        raise ValueError(
            f"cross_entropy: {x2.shape[0]} logit rows vs {t1.shape[0]} targets"
        )
    live = np.ones(t1.shape, dtype=bool) if ignore_id is None else t1 != ignore_id
    rows = np.nonzero(live)[0]
    if rows.size == 0:
        raise ValueError("cross_entropy: every target position is ignored")
    bad = (t1[rows] < 0) | (t1[rows] >= K)
    if bad.any():
        r = int(rows[bad.argmax()])
        raise ValueError(f"cross_entropy: target id {int(t1[r])} at row {r} outside {K} classes")
    m = x2.max(axis=1, keepdims=True)
    e = np.exp(x2 - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s)).ravel()
    count = rows.size
    out = np.asarray((lse[rows] - x2[rows, t1[rows]]).sum() / count, dtype=x2.dtype)

    def bk(g, acc):
        p = e / s
        p[rows, t1[rows]] -= 1
        full = np.zeros_like(x2)
        full[rows] = p[rows]
        acc(logits, (full * (g / count)).reshape(logits.data.shape))

    return _make(out, (logits,), bk)
