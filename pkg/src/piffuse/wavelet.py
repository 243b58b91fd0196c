"""Single-level orthonormal 2D Haar transform on [..., H, W, C] features.

Each non-overlapping 2x2 block ``[a b; c d]`` maps to

    ll = (a + b + c + d) / 2        lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2        hh = (a - b - c + d) / 2

The 4x4 block matrix is symmetric and orthogonal, so synthesis uses the
same formulas and each transform is the other's adjoint (|det| = 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, lift, make_op, split


@dataclass
class WaveletPyramid:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh

    def details(self) -> Tensor:
        """lh, hl, hh packed along channels (3C channels)."""
        return concat([self.lh, self.hl, self.hh], axis=-1)

    @classmethod
    def from_details(cls, ll: Tensor, packed: Tensor) -> "WaveletPyramid":
        lh, hl, hh = split(packed, 3, axis=-1)
        return cls(ll, lh, hl, hh)


def _analyze_np(x: np.ndarray):
    a = x[..., 0::2, 0::2, :]
    b = x[..., 0::2, 1::2, :]
    c = x[..., 1::2, 0::2, :]
    d = x[..., 1::2, 1::2, :]
    return ((a + b + c + d) * 0.5, (a + b - c - d) * 0.5,
            (a - b + c - d) * 0.5, (a - b - c + d) * 0.5)


def _synthesize_np(ll, lh, hl, hh):
    *lead, h, w, c = ll.shape
    out = np.empty((*lead, 2 * h, 2 * w, c), dtype=ll.dtype)
    out[..., 0::2, 0::2, :] = (ll + lh + hl + hh) * 0.5
    out[..., 0::2, 1::2, :] = (ll + lh - hl - hh) * 0.5
    out[..., 1::2, 0::2, :] = (ll - lh + hl - hh) * 0.5
    out[..., 1::2, 1::2, :] = (ll - lh - hl + hh) * 0.5
    return out


def haar_analyze(x) -> WaveletPyramid:
    x = lift(x)
    if x.ndim < 3:
        raise ShapeError(f"expected [..., H, W, C], got {x.shape}")
    H, W = x.shape[-3], x.shape[-2]
    if H % 2 or W % 2:
        raise ShapeError(f"Haar analysis needs even H and W, got {H}x{W}")
    bands = _analyze_np(x.data)
    # one op per band keeps the adjoint simple: synthesis of that band alone
    outs = []
    for k in range(4):
        def bw(g, k=k):
            parts = [np.zeros_like(g) for _ in range(4)]
            parts[k] = g
            return (_synthesize_np(*parts),)
        outs.append(make_op(np.ascontiguousarray(bands[k]), (x,), bw, "haar_analyze"))
    return WaveletPyramid(*outs)


def haar_synthesize(p: WaveletPyramid) -> Tensor:
    bands = [lift(b) for b in p.bands()]
    shapes = {b.shape for b in bands}
    if len(shapes) != 1:
        raise ShapeError(f"subband shapes differ: {[b.shape for b in bands]}")
    out = _synthesize_np(*(b.data for b in bands))
    return make_op(out, bands, lambda g: tuple(np.ascontiguousarray(t) for t in _analyze_np(g)),
                   "haar_synthesize")
