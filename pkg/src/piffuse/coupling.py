"""Affine coupling between the high- and low-frequency streams.

Forward (conditioning on the updated high-frequency stream so the map has
a closed-form inverse)::

    xh' = xh + i1(xl)
    s   = alpha * tanh(i2(xh') / alpha)
    xl' = xl * exp(s) + i3(xh')

The Jacobian is block-triangular, so log|det| = sum(s).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .nn import Conv2dLayer, Module
from .ssm import SsmmBlock
from .tensor import ShapeError, Tensor, lift


class CouplingSubnet(Module):
    """SSMM followed by a zero-initialised 1x1 projection (outputs 0 at init)."""

    def __init__(self, channels: int, state: int = 8, rng=None, dtype=np.float32):
        self.ssmm = SsmmBlock(channels, state, rng=rng, dtype=dtype)
        self.out = Conv2dLayer(channels, channels, 1, zero_init=True, rng=rng, dtype=dtype)

    def forward(self, x) -> Tensor:
        return self.out(self.ssmm(x))


def _sum_per_sample(s: Tensor, batched: bool) -> Tensor:
    if batched:
        return T.sum(s, axis=tuple(range(1, s.ndim)))
    return T.sum(s)


class CouplingBlock(Module):
    """One invertible block.  ``i1``/``i2``/``i3`` may be any [.., H, W, D] -> same callables."""

    def __init__(self, channels: int | None = None, state: int = 8, alpha: float = 2.0,
                 rng=None, dtype=np.float32, i1: Callable | None = None,
                 i2: Callable | None = None, i3: Callable | None = None):
        make = lambda: CouplingSubnet(channels, state, rng, dtype)  # noqa: E731
        self.i1 = i1 if i1 is not None else make()
        self.i2 = i2 if i2 is not None else make()
        self.i3 = i3 if i3 is not None else make()
        self.alpha = float(alpha)

    def scale(self, xh_new: Tensor) -> Tensor:
        a = self.alpha
        return T.scale(T.tanh(T.scale(self.i2(xh_new), 1.0 / a)), a)

    def forward(self, xh, xl):
        xh, xl = lift(xh), lift(xl)
        if xh.shape != xl.shape:
            raise ShapeError(f"coupling streams differ in shape: {xh.shape} vs {xl.shape}")
        xh_new = xh + self.i1(xl)
        s = self.scale(xh_new)
        xl_new = xl * T.exp(s) + self.i3(xh_new)
        return xh_new, xl_new, _sum_per_sample(s, xh.ndim == 4)

    def inverse(self, xh_new, xl_new):
        xh_new, xl_new = lift(xh_new), lift(xl_new)
        if xh_new.shape != xl_new.shape:
            raise ShapeError(f"coupling streams differ in shape: {xh_new.shape} vs {xl_new.shape}")
        s = self.scale(xh_new)
        xl = (xl_new - self.i3(xh_new)) * T.exp(-s)
        if not np.isfinite(xl.data).all():
            raise FloatingPointError("non-finite value in coupling inverse")
        xh = xh_new - self.i1(xl)
        return xh, xl


def coupling_forward(xh, xl, b: CouplingBlock):
    return b.forward(xh, xl)


def coupling_inverse(xh_new, xl_new, b: CouplingBlock):
    return b.inverse(xh_new, xl_new)


class CouplingStack(Module):
    def __init__(self, blocks: list[CouplingBlock]):
        if not blocks:
            raise ValueError("a coupling stack needs at least one block")
        self.blocks = list(blocks)

    @classmethod
    def build(cls, n_blocks: int, channels: int, state: int = 8, alpha: float = 2.0,
              rng=None, dtype=np.float32) -> "CouplingStack":
        return cls([CouplingBlock(channels, state, alpha, rng, dtype) for _ in range(n_blocks)])

    def forward(self, xh, xl):
        total = None
        for blk in self.blocks:
            xh, xl, ld = blk.forward(xh, xl)
            total = ld if total is None else total + ld
        return xh, xl, total

    def inverse(self, xh, xl):
        for blk in reversed(self.blocks):
            xh, xl = blk.inverse(xh, xl)
        return xh, xl


def stack_forward(xh, xl, s: CouplingStack):
    return s.forward(xh, xl)
