"""Image encoder: residual CNN (default) or the plain stacked-conv variant.

The residual path is a stem (two 3x3 convs + 2x2 max pool) followed by
residual blocks of two 3x3 convs with ReLU; downsampling blocks put stride 2
on their first conv, and a 1x1 projection carries the shortcut whenever
channels or resolution change.  The final feature map is flattened row-major
into a sequence of D-dimensional vectors, one per grid cell.

The simple variant is the fixed six-conv/four-pool stack often used as a
baseline encoder; it ignores block_plan and always ends at 512 channels.

Both variants downsample by 8 in each dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError

# (out_channels, downsample) per residual block; ends at 512 like the
# channel anchors the ablation variants are measured against.
DEFAULT_BLOCK_PLAN = ((64, False), (128, True), (128, False), (256, True), (256, False), (512, False))

# Fixed plan of the simple variant: (channels, pool after this conv) where
# pool is None or a (pool_h, pool_w) window.
_SIMPLE_PLAN = ((64, (2, 2)), (128, (2, 2)), (256, None), (256, (1, 2)), (512, (2, 1)), (512, None))


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 64
    block_plan: tuple = DEFAULT_BLOCK_PLAN
    variant: str = "residual"

    def validate(self, d_model):
        if self.variant not in ("residual", "simple"):
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.variant == "residual":
            if not self.block_plan:
                raise ConfigError("residual encoder needs a non-empty block_plan")
            if self.block_plan[-1][0] != d_model:
                raise ConfigError(
                    f"encoder final channels {self.block_plan[-1][0]} != model dimension {d_model}"
                )
        elif d_model != 512:
            raise ConfigError("simple encoder variant always produces 512 channels")

    def downsample_factor(self):
        if self.variant == "simple":
            return 8
        f = 2  # stem pool
        for _, down in self.block_plan:
            if down:
                f *= 2
        return f

    def final_channels(self):
        return 512 if self.variant == "simple" else self.block_plan[-1][0]


def scaled_plan(d_model):
    """The default six-block plan with channels scaled so the last equals d_model."""
    plan = tuple((max(4, (c * d_model) // 512), down) for c, down in DEFAULT_BLOCK_PLAN[:-1])
    return plan + ((d_model, DEFAULT_BLOCK_PLAN[-1][1]),)


def scaled_stem(d_model):
    return max(4, (64 * d_model) // 512)


@dataclass
class FeatureSequence:
    """Encoder output: one vector per feature-map cell, row-major.

    vectors is (S, D) for a single image or (B, S, D) for a batch, with
    S = grid_height * grid_width and index j = row * grid_width + col.
    """

    vectors: T.Tensor
    grid_width: int
    grid_height: int


# ---------------------------------------------------------------- parameters

def init_encoder_params(cfg, rng, in_channels=1):
    """Ordered name -> Parameter dict; uniform [-s, s] with s = sqrt(3/fan_in)
    (weight variance 1/fan_in), zero biases.  Full relu gain (2/fan_in) makes
    the residual stack's output overwhelm the attention softmax downstream —
    there is no normalization anywhere to absorb it — while 1/fan_in keeps the
    conv paths comparable to the shortcuts without the blow-up."""

    params = {}

    def conv(name, co, ci, kh, kw, gain=1.0):
        s = float(np.sqrt(3.0 * gain / (ci * kh * kw)))
        params[f"{name}.w"] = T.Parameter(f"{name}.w", rng.uniform(-s, s, (co, ci, kh, kw)))
        params[f"{name}.b"] = T.Parameter(f"{name}.b", np.zeros(co))

    if cfg.variant == "simple":
        ci = in_channels
        for i, (co, _pool) in enumerate(_SIMPLE_PLAN):
            conv(f"enc.conv{i + 1}", co, ci, 3, 3)
            ci = co
        return params

    conv("enc.stem1", cfg.stem_channels, in_channels, 3, 3)
    conv("enc.stem2", cfg.stem_channels, cfg.stem_channels, 3, 3)
    ci = cfg.stem_channels
    for i, (co, down) in enumerate(cfg.block_plan):
        conv(f"enc.block{i}.conv1", co, ci, 3, 3)
        conv(f"enc.block{i}.conv2", co, co, 3, 3)
        if co != ci or down:
            conv(f"enc.block{i}.proj", co, ci, 1, 1, gain=1.0)
        ci = co
    return params


# ---------------------------------------------------------------- forward

def _p(params, name):
    return params[name].value


def _res_block(x, params, prefix, downsample, has_proj):
    stride = 2 if downsample else 1
    y = T.relu(T.conv2d(x, _p(params, f"{prefix}.conv1.w"), _p(params, f"{prefix}.conv1.b"), stride=stride, padding=1))
    y = T.conv2d(y, _p(params, f"{prefix}.conv2.w"), _p(params, f"{prefix}.conv2.b"), stride=1, padding=1)
    if has_proj:
        shortcut = T.conv2d(x, _p(params, f"{prefix}.proj.w"), _p(params, f"{prefix}.proj.b"), stride=stride, padding=0)
    else:
        shortcut = x
    return T.relu(T.add(y, shortcut))


def encode(image, cfg, params):
    """Image (1,H,W) or (B,1,H,W) -> FeatureSequence.

    H and W must be multiples of the downsample factor (bucket sizes are)."""
    single = image.ndim == 3
    x = T.reshape(image, (1,) + image.data.shape) if single else image
    H, W = x.data.shape[2:]
    f = cfg.downsample_factor()
    if H % f or W % f:
        raise ConfigError(f"image extents {W}x{H} must be multiples of the downsample factor {f}")

    if cfg.variant == "simple":
        for i, (_co, pool) in enumerate(_SIMPLE_PLAN):
            x = T.relu(T.conv2d(x, _p(params, f"enc.conv{i + 1}.w"), _p(params, f"enc.conv{i + 1}.b"), stride=1, padding=1))
            if pool:
                x = T.maxpool2d(x, pool[0], pool[1])
    else:
        x = T.relu(T.conv2d(x, _p(params, "enc.stem1.w"), _p(params, "enc.stem1.b"), stride=1, padding=1))
        x = T.relu(T.conv2d(x, _p(params, "enc.stem2.w"), _p(params, "enc.stem2.b"), stride=1, padding=1))
        x = T.maxpool2d(x, 2, 2)
        for i, (_co, down) in enumerate(cfg.block_plan):
            x = _res_block(x, params, f"enc.block{i}", down, f"enc.block{i}.proj.w" in params)

    B, D, Hp, Wp = x.data.shape
    vectors = T.transpose(T.reshape(x, (B, D, Hp * Wp)), (0, 2, 1))  # row-major cells
    if single:
        vectors = T.reshape(vectors, (Hp * Wp, D))
    return FeatureSequence(vectors, grid_width=Wp, grid_height=Hp)


def add_source_positions(features, pos_table):
    """Add learned position rows to the feature vectors (in a new sequence)."""
    S = features.vectors.data.shape[-2]
    P = pos_table.data.shape[0]
    if S > P:
        raise ConfigError(f"{S} feature vectors exceed the source position table ({P} rows)")
    out = T.add(features.vectors, T.narrow(pos_table, 0, 0, S))
    return FeatureSequence(out, features.grid_width, features.grid_height)
