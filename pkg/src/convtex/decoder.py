"""Causal convolutional decoder with GLU gating and per-layer attention.

Each block transforms the running target representation h (B, N, D):

    m = causal_conv(h_prev)           # 2D channels
    u = glu(m)                        # gate down to D
    r = u + h_prev                    # residual
    c, a = attention(r, g, V)         # dot-product over feature vectors
    h = r + c

The attention query is d = W_d r + b_d + g (g = token+position embeddings),
scores are plain dot products with the feature vectors, weights a softmax over
them, and the content c their weighted sum.  Output scores are W_o h + b_o.

Every forward op on this path is row-stable (stable_matmul / conv1d_causal),
which is what makes incremental decoding bit-identical to scoring the whole
prefix in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 7
    kernel_width: int = 3
    channels: int = 512
    max_target_positions: int = 512

    def validate(self):
        problems = []
        if self.depth < 1:
            problems.append(f"decoder depth must be >= 1, got {self.depth}")
        if self.kernel_width < 1:
            problems.append(f"kernel width must be >= 1, got {self.kernel_width}")
        if self.channels % 2:
            problems.append(f"channels must be even for the GLU split, got {self.channels}")
        if self.max_target_positions < 2:
            problems.append("max_target_positions must allow at least start + one token")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class BlockState:
    """Output of one decoder block: h plus its attention diagnostics."""

    h: T.Tensor
    attn_weights: T.Tensor
    content: T.Tensor


# ---------------------------------------------------------------- parameters

def init_decoder_params(cfg, vocab_size, rng):
    """Ordered name -> Parameter dict.

    Embedding tables are normal(0, 0.1); gated conv weights uniform [-s, s]
    with s = sqrt(12/fan_in) — the gate passes roughly a quarter of the
    variance at the start, so the conv needs 4x the usual weight variance to
    keep up with the residual path; attention and output projections stay at
    the conservative s = sqrt(1/fan_in); biases zero."""
    D, k = cfg.channels, cfg.kernel_width
    params = {}

    def put(name, arr):
        params[name] = T.Parameter(name, arr)

    put("dec.embed.tok", rng.normal(0.0, 0.1, (vocab_size, D)))
    put("dec.embed.pos", rng.normal(0.0, 0.1, (cfg.max_target_positions, D)))
    for l in range(cfg.depth):
        s = float(np.sqrt(12.0 / (D * k)))
        put(f"dec.layer{l}.conv.w", rng.uniform(-s, s, (2 * D, D, k)))
        put(f"dec.layer{l}.conv.b", np.zeros(2 * D))
        s = float(np.sqrt(1.0 / D))
        put(f"dec.layer{l}.attn.wd", rng.uniform(-s, s, (D, D)))
        put(f"dec.layer{l}.attn.bd", np.zeros(D))
    s = float(np.sqrt(1.0 / D))
    put("dec.out.w", rng.uniform(-s, s, (vocab_size, D)))
    put("dec.out.b", np.zeros(vocab_size))
    return params


def _p(params, name):
    return params[name].value


# ---------------------------------------------------------------- ops

def embed_targets(ids, params, cfg):
    """Token ids (N,) or (B, N) -> g = token_embedding + position_embedding."""
    ids = np.asarray(ids, dtype=np.int64)
    N = ids.shape[-1]
    if N > cfg.max_target_positions:
        raise ConfigError(f"{N} target positions exceed the limit {cfg.max_target_positions}")
    tok = T.embedding_lookup(_p(params, "dec.embed.tok"), ids)
    pos = T.narrow(_p(params, "dec.embed.pos"), 0, 0, N)
    return T.add(tok, pos)


def attention(h, g, V, wd, bd):
    """Dot-product attention over the feature sequence.

    h, g: (N, D) or (B, N, D); V: FeatureSequence with matching batching.
    Returns (content, weights); weights rows sum to 1."""
    d = T.add(T.add(T.stable_matmul(h, T.transpose(wd, (1, 0))), bd), g)
    vec = V.vectors
    vt = T.transpose(vec, (1, 0) if vec.ndim == 2 else (0, 2, 1))
    weights = T.softmax(T.stable_matmul(d, vt), axis=-1)
    content = T.stable_matmul(weights, vec)
    return content, weights


def decoder_block(h_prev, g, V, params, layer):
    """One block: gated causal conv, residual, attention, residual.

    Batched layout only: h_prev and g are (B, N, D)."""
    if h_prev.ndim != 3:
        raise ValueError(f"decoder_block expects (B, N, D), got rank {h_prev.ndim}")
    m = T.conv1d_causal(h_prev, _p(params, f"dec.layer{layer}.conv.w"), _p(params, f"dec.layer{layer}.conv.b"))
    u = T.glu(m, axis=-1)
    r = T.add(u, h_prev)
    content, weights = attention(r, g, V, _p(params, f"dec.layer{layer}.attn.wd"), _p(params, f"dec.layer{layer}.attn.bd"))
    h = T.add(r, content)
    return BlockState(h=h, attn_weights=weights, content=content)


def logits(h, params):
    """Scores over the vocabulary for each position: W_o h + b_o."""
    return T.add(T.stable_matmul(h, T.transpose(_p(params, "dec.out.w"), (1, 0))), _p(params, "dec.out.b"))


def run_decoder(g, V, params, cfg):
    """Stack all blocks over embedded targets g; returns (h_L, block states)."""
    h = g
    states = []
    for layer in range(cfg.depth):
        state = decoder_block(h, g, V, params, layer)
        states.append(state)
        h = state.h
    return h, states
