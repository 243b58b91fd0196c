"""Residual prior extraction and high-frequency semantic guidance."""

from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .nn import Conv2dLayer, Module, bicubic_upsample, conv2d_op
from .tensor import ShapeError, Tensor, lift

log = logging.getLogger(__name__)


def local_mean3(x: Tensor) -> Tensor:
    """Per-channel 3x3 box mean; border pixels average only their in-image neighbours."""
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1, *x.shape))
    C = x.shape[-1]
    H, W = x.shape[1], x.shape[2]
    box = T.Tensor(np.ones((3, 3, 1, C), dtype=x.dtype))
    summed = conv2d_op(x, box, None, groups=C)
    rows = np.full(H, 3.0)
    cols = np.full(W, 3.0)
    if H > 1:
        rows[[0, -1]] = 2.0
    else:
        rows[:] = 1.0
    if W > 1:
        cols[[0, -1]] = 2.0
    else:
        cols[:] = 1.0
    count = np.outer(rows, cols)[None, :, :, None].astype(x.dtype)
    out = summed / count
    return T.reshape(out, out.shape[1:]) if squeeze else out


def residue_channel_gate(xs, local_mean: bool = True) -> Tensor:
    """Per-pixel spread (max - min over channels) of locally averaged features.

    Returns [..., H, W, 1], always >= 0.  With ``local_mean=False`` the raw
    features are used directly.
    """
    xs = lift(xs)
    if xs.shape[-1] < 2:
        log.warning("residue channel gate on a single channel is identically zero")
    xbar = local_mean3(xs) if local_mean else xs
    return T.amax(xbar, axis=-1, keepdims=True) - T.amin(xbar, axis=-1, keepdims=True)


class PriorExtractor(Module):
    def __init__(self, channels: int, beta: float = 1.0, local_mean: bool = True,
                 rng=None, dtype=np.float32):
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {beta}")
        self.diff_conv = Conv2dLayer(channels, channels, 3, rng=rng, dtype=dtype)
        self.refine_conv = Conv2dLayer(channels, channels, 3, rng=rng, dtype=dtype)
        self.beta = float(beta)
        self.local_mean = local_mean

    def forward(self, xs, ys) -> Tensor:
        xs, ys = lift(xs), lift(ys)
        if xs.shape != ys.shape:
            raise ShapeError(f"prior inputs differ in shape: {xs.shape} vs {ys.shape}")
        gate = residue_channel_gate(xs, self.local_mean)
        t = T.relu(self.diff_conv(xs - ys)) * gate
        x_r = T.relu(self.refine_conv(t))
        return T.scale(x_r, self.beta)


def extract_prior(xs, ys, p: PriorExtractor) -> Tensor:
    return p(xs, ys)


class HfSemanticPerception(Module):
    """relu(conv3x3([upsample2(high-freq features), prior]))."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        self.fuse = Conv2dLayer(2 * channels, channels, 3, rng=rng, dtype=dtype)

    def forward(self, xh_feats, x_r) -> Tensor:
        xh_feats, x_r = lift(xh_feats), lift(x_r)
        h, w = xh_feats.shape[-3], xh_feats.shape[-2]
        if x_r.shape[-3:-1] != (2 * h, 2 * w):
            raise ShapeError(f"prior must be exactly twice the size of {h}x{w}, got {x_r.shape}")
        up = bicubic_upsample(xh_feats, 2)
        return T.relu(self.fuse(T.concat([up, x_r], axis=-1)))


def hf_semantic_guidance(xh_feats, x_r, m: HfSemanticPerception) -> Tensor:
    return m(xh_feats, x_r)
