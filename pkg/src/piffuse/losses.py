"""Training objective: L1 fidelity + log-det volume term + cosine consistency."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, lift

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    l1: Tensor
    l_inv: Tensor
    l_cos: Tensor
    total: Tensor
    lambda_inv: float
    lambda_cos: float

    def as_floats(self) -> dict[str, float]:
        return {"l1": self.l1.item(), "l_inv": self.l_inv.item(), "l_cos": self.l_cos.item(),
                "total": self.total.item()}


def l1_loss(z_hat: Tensor, z: Tensor) -> Tensor:
    return T.mean(T.absolute(z_hat - z))


def invertibility_loss(logdet: Tensor, coupled_elements: int, signed: bool = False) -> Tensor:
    """Mean over samples of |logdet| / n (or the signed logdet / n)."""
    per = T.scale(logdet, 1.0 / coupled_elements)
    if not signed:
        per = T.absolute(per)
    return T.mean(per)


def cosine_loss(z_bar: Tensor, z_hat: Tensor, per_pixel: bool = False) -> Tensor:
    """1 - cos over each sample's flattened tensor (or averaged per pixel)."""
    batched = z_hat.ndim == 4
    if per_pixel:
        axes = -1
    else:
        axes = tuple(range(1, z_hat.ndim)) if batched else None
    dot = T.sum(z_bar * z_hat, axis=axes)
    na = T.sum(T.square(z_bar), axis=axes)
    nb = T.sum(T.square(z_hat), axis=axes)
    zero = (na.data == 0) | (nb.data == 0)
    if np.any(zero):
        log.warning("cosine loss on a zero-norm input; treating it as orthogonal")
        safe = T.Tensor(np.where(zero, 1.0, 0.0).astype(z_hat.dtype))
        cos = dot / T.sqrt(na * nb + safe)
    else:
        cos = dot / T.sqrt(na * nb)
    return T.mean(1.0 - cos)


def composite_loss(z_hat, z, z_bar, logdet, lambda_inv: float = 0.01, lambda_cos: float = 0.1,
                   coupled_elements: int = 1, signed_logdet: bool = False,
                   cos_per_pixel: bool = False) -> LossBreakdown:
    z_hat, z, z_bar, logdet = lift(z_hat), lift(z), lift(z_bar), lift(logdet)
    if not (z_hat.shape == z.shape == z_bar.shape):
        raise ShapeError(f"loss inputs differ in shape: {z_hat.shape}, {z.shape}, {z_bar.shape}")
    l1 = l1_loss(z_hat, z)
    l_inv = invertibility_loss(logdet, coupled_elements, signed_logdet)
    l_cos = cosine_loss(z_bar, z_hat, cos_per_pixel)
    total = l1 + T.scale(l_inv, lambda_inv) + T.scale(l_cos, lambda_cos)
    return LossBreakdown(l1, l_inv, l_cos, total, lambda_inv, lambda_cos)
