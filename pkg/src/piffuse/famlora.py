"""Fusion-aware multi-head low-rank adaptation block."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2dLayer, LkaLayer, Module, SeLayer, global_avg_pool
from .tensor import Parameter, ShapeError, Tensor, lift


class LoraHead(Module):
    """delta = x @ down @ up over one channel quarter; ``up`` starts at zero."""

    def __init__(self, width: int, rank: int, rng=None, dtype=np.float32):
        if rank > width:
            raise ValueError(f"LoRA rank {rank} exceeds head width {width}")
        rng = np.random.default_rng() if rng is None else rng
        self.down = Parameter(rng.standard_normal((width, rank)), dtype=dtype)
        self.up = Parameter(np.zeros((rank, width)), dtype=dtype)
        self.rank = rank

    def forward(self, x) -> Tensor:
        return (lift(x) @ self.down) @ self.up


def multihead_lora(x, heads: list[LoraHead]) -> Tensor:
    x = lift(x)
    if len(heads) != 4:
        raise ValueError("multi-head LoRA uses exactly four heads")
    quarters = T.split(x, 4, axis=-1)
    return T.concat([q + h(q) for q, h in zip(quarters, heads)], axis=-1)


class FamLoraBlock(Module):
    """Channel transforms, LKA+SE applied twice (second pass guided by the
    prior and gradient-stopped for the attention weights), output transforms
    and a 4-head LoRA, wrapped in a residual connection."""

    def __init__(self, channels: int, rank: int = 4, se_ratio: int = 4,
                 share_attention: bool = True, rng=None, dtype=np.float32):
        if channels % 4:
            raise ValueError(f"FAM-LoRA needs channels divisible by 4, got {channels}")
        self.t1 = Conv2dLayer(channels, channels, 1, rng=rng, dtype=dtype)
        self.t2 = Conv2dLayer(channels, channels, 1, rng=rng, dtype=dtype)
        self.t3 = Conv2dLayer(channels, channels, 1, rng=rng, dtype=dtype)
        self.t4 = Conv2dLayer(channels, channels, 1, zero_init=True, rng=rng, dtype=dtype)
        self.lka = LkaLayer(channels, rng=rng, dtype=dtype)
        self.se = SeLayer(channels, se_ratio, rng=rng, dtype=dtype)
        if share_attention:
            self.lka2, self.se2 = None, None
        else:
            self.lka2 = LkaLayer(channels, rng=rng, dtype=dtype)
            self.se2 = SeLayer(channels, se_ratio, rng=rng, dtype=dtype)
        self.heads = [LoraHead(channels // 4, rank, rng, dtype) for _ in range(4)]
        self.channels = channels
        self.pass2_frozen = True
        self._detach_pass1 = False  # gradient-differencing control only

    def attention(self, u: Tensor, second: bool, inject=None) -> Tensor:
        lka = self.lka2 if second and self.lka2 is not None else self.lka
        se = self.se2 if second and self.se2 is not None else self.se
        detach = self.pass2_frozen if second else self._detach_pass1
        return se(lka(u, detach_params=detach), inject=inject, detach_params=detach)

    def forward(self, y, x_r) -> Tensor:
        y, x_r = lift(y), lift(x_r)
        if y.shape != x_r.shape:
            raise ShapeError(f"FAM-LoRA inputs differ in shape: {y.shape} vs {x_r.shape}")
        u = self.t2(T.relu(self.t1(y)))
        u = self.attention(u, second=False)
        u = self.attention(u, second=True, inject=global_avg_pool(x_r))
        u = self.t4(T.relu(self.t3(u)))
        return y + multihead_lora(u, self.heads)


def fam_lora_forward(y, x_r, b: FamLoraBlock) -> Tensor:
    return b(y, x_r)


def freeze_attention(b: FamLoraBlock, frozen: bool = True) -> None:
    """Stop (or, with ``frozen=False``, restore) gradients through the second pass."""
    b.pass2_frozen = bool(frozen)


def toggle_attention_freeze(b: FamLoraBlock) -> bool:
    b.pass2_frozen = not b.pass2_frozen
    return b.pass2_frozen
