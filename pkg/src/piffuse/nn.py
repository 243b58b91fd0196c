"""Layers shared by both branches: convolutions, bicubic upsampling,
global pooling, Large-Kernel Attention and Squeeze-and-Excitation.

Feature maps are channels-last, ``[H, W, C]`` or batched ``[B, H, W, C]``.
"""

from __future__ import annotations

import functools
import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor, lift, make_op


class Module:
    """Parameter container; children and parameters are found via attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val._walk(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype):
        for p in self.parameters():
            p.cast_(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(p: Parameter, detach: bool) -> Tensor:
    return p.detach() if detach else p


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _window(xp, i, j, dilation, stride, Ho, Wo):
    r0, c0 = i * dilation, j * dilation
    return (slice(None), slice(r0, r0 + stride * (Ho - 1) + 1, stride),
            slice(c0, c0 + stride * (Wo - 1) + 1, stride), slice(None))


def _conv_kernel(x, w, b, stride, dilation, groups, pad):
    """Cross-correlation on [B, H, W, Cin] with weight [k, k, Cin/g, Cout].

    Returns the output and whatever the adjoint needs (padded input or
    im2col matrix).
    """
    B, H, W, Cin = x.shape
    k = w.shape[0]
    Cout = w.shape[3]
    cin_g, cout_g = Cin // groups, Cout // groups
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    span = dilation * (k - 1) + 1
    Ho = (xp.shape[1] - span) // stride + 1
    Wo = (xp.shape[2] - span) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"input {x.shape} too small for a {k}x{k} kernel (dilation {dilation})")
    cols = None
    if groups == 1:
        if k == 1:
            cols = xp[:, ::stride, ::stride, :][:, :Ho, :Wo, :].reshape(-1, Cin)
        else:
            cols = np.empty((B, Ho, Wo, k, k, Cin), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    cols[:, :, :, i, j, :] = xp[_window(xp, i, j, dilation, stride, Ho, Wo)]
            cols = cols.reshape(-1, k * k * Cin)
        out = (cols @ w.reshape(-1, Cout)).reshape(B, Ho, Wo, Cout)
    elif cin_g == 1 and cout_g == 1:
        out = np.zeros((B, Ho, Wo, Cout), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += xp[_window(xp, i, j, dilation, stride, Ho, Wo)] * w[i, j, 0]
    else:
        out = np.zeros((B, Ho, Wo, Cout), dtype=x.dtype)
        wg = w.reshape(k, k, cin_g, groups, cout_g)
        for i in range(k):
            for j in range(k):
                xg = xp[_window(xp, i, j, dilation, stride, Ho, Wo)].reshape(B, Ho, Wo, groups, cin_g)
                out += np.einsum("bhwgc,cgo->bhwgo", xg, wg[i, j]).reshape(B, Ho, Wo, Cout)
    if b is not None:
        out += b
    return out, xp, cols


def _conv_adjoint(g, xp, cols, w, stride, dilation, groups, pad, x_shape, need_x, need_w):
    B, H, W, Cin = x_shape
    k = w.shape[0]
    Cout = w.shape[3]
    cin_g, cout_g = Cin // groups, Cout // groups
    Ho, Wo = g.shape[1], g.shape[2]
    gxp = None
    gw = None
    if groups == 1:
        g2 = g.reshape(-1, Cout)
        if need_w:
            gw = (cols.T @ g2).reshape(w.shape)
        if need_x:
            gcols = g2 @ w.reshape(-1, Cout).T
            if k == 1 and stride == 1 and not pad:
                return np.ascontiguousarray(gcols.reshape(x_shape)), gw
            gxp = np.zeros_like(xp)
            gcols = gcols.reshape(B, Ho, Wo, k, k, Cin)
            for i in range(k):
                for j in range(k):
                    gxp[_window(xp, i, j, dilation, stride, Ho, Wo)] += gcols[:, :, :, i, j, :]
    elif cin_g == 1 and cout_g == 1:
        gxp = np.zeros_like(xp) if need_x else None
        gw = np.zeros_like(w) if need_w else None
        for i in range(k):
            for j in range(k):
                sl = _window(xp, i, j, dilation, stride, Ho, Wo)
                if need_x:
                    gxp[sl] += g * w[i, j, 0]
                if need_w:
                    gw[i, j, 0] = (xp[sl] * g).sum(axis=(0, 1, 2))
    else:
        gxp = np.zeros_like(xp) if need_x else None
        gw = np.zeros_like(w) if need_w else None
        wg = w.reshape(k, k, cin_g, groups, cout_g)
        gg = g.reshape(B, Ho, Wo, groups, cout_g)
        for i in range(k):
            for j in range(k):
                sl = _window(xp, i, j, dilation, stride, Ho, Wo)
                if need_x:
                    gxp[sl] += np.einsum("bhwgo,cgo->bhwgc", gg, wg[i, j]).reshape(B, Ho, Wo, Cin)
                if need_w:
                    xg = xp[sl].reshape(B, Ho, Wo, groups, cin_g)
                    gw[i, j] = np.einsum("bhwgc,bhwgo->cgo", xg, gg).reshape(cin_g, Cout)
    gx = None
    if need_x:
        gx = gxp[:, pad:pad + H, pad:pad + W, :] if pad else gxp
        gx = np.ascontiguousarray(gx)
    return gx, gw


def conv2d_op(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, dilation: int = 1,
              groups: int = 1, padding: str = "same") -> Tensor:
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1, *x.shape))
    k, k2, cin_g, Cout = w.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    Cin = x.shape[-1]
    if Cin != cin_g * groups:
        raise ShapeError(f"input has {Cin} channels, layer expects {cin_g * groups}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("'same' padding needs an odd kernel")
        pad = dilation * (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    out, xp, cols = _conv_kernel(x.data, w.data, None if b is None else b.data,
                                 stride, dilation, groups, pad)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx, gw = _conv_adjoint(g, xp, cols, w.data, stride, dilation, groups, pad, x.shape,
                               x.requires_grad, w.requires_grad)
        if b is None:
            return gx, gw
        gb = g.sum(axis=(0, 1, 2)) if b.requires_grad else None
        return gx, gw, gb

    y = make_op(out, parents, bw, "conv2d")
    return T.reshape(y, y.shape[1:]) if squeeze else y


class Conv2dLayer(Module):
    """k x k convolution, weight laid out [k, k, Cin/groups, Cout]."""

    def __init__(self, cin: int, cout: int, k: int = 1, *, stride: int = 1, dilation: int = 1,
                 groups: int = 1, padding: str = "same", bias: bool = True,
                 zero_init: bool = False, rng=None, dtype=np.float32):
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
        rng = np.random.default_rng() if rng is None else rng
        fan_in = k * k * (cin // groups)
        shape = (k, k, cin // groups, cout)
        if zero_init:
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        self.weight = Parameter(w, dtype=dtype)
        self.bias = Parameter(np.zeros(cout), dtype=dtype) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding = padding
        self.cin, self.cout, self.k = cin, cout, k

    def forward(self, x, detach_params: bool = False) -> Tensor:
        b = None if self.bias is None else _param(self.bias, detach_params)
        return conv2d_op(lift(x), _param(self.weight, detach_params), b,
                         self.stride, self.dilation, self.groups, self.padding)


def conv2d(x, layer: Conv2dLayer) -> Tensor:
    return layer(x)


# ---------------------------------------------------------------------------
# resampling and pooling
# ---------------------------------------------------------------------------

def cubic_kernel(t, a: float = -0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


@functools.lru_cache(maxsize=64)
def _bicubic_matrix(n: int, s: int, a: float) -> np.ndarray:
    M = np.zeros((s * n, n))
    for d in range(s * n):
        src = (d + 0.5) / s - 0.5
        base = math.floor(src)
        for tap in range(base - 1, base + 3):
            M[d, min(max(tap, 0), n - 1)] += cubic_kernel(src - tap, a)
    M.flags.writeable = False
    return M


def bicubic_matrix(n: int, s: int, a: float = -0.5) -> np.ndarray:
    """[s*n, n] interpolation matrix: half-pixel centres, clamped edges."""
    return _bicubic_matrix(int(n), int(s), float(a))


def bicubic_upsample(x, s: int) -> Tensor:
    x = lift(x)
    if not isinstance(s, (int, np.integer)) or s < 1:
        raise ValueError(f"scale must be an integer >= 1, got {s!r}")
    if s == 1:
        return x
    h, w = x.shape[-3], x.shape[-2]
    y = T.axis_linear(x, bicubic_matrix(h, s), axis=-3)
    return T.axis_linear(y, bicubic_matrix(w, s), axis=-2)


def global_avg_pool(x) -> Tensor:
    """[..., H, W, C] -> [..., C]."""
    x = lift(x)
    return T.mean(x, axis=(-3, -2))


# ---------------------------------------------------------------------------
# attention layers
# ---------------------------------------------------------------------------

class SeLayer(Module):
    """Squeeze-and-Excitation with an additive injection port on the descriptor."""

    def __init__(self, channels: int, ratio: int = 4, rng=None, dtype=np.float32):
        hidden = max(1, channels // ratio)
        self.reduce = Conv2dLayer(channels, hidden, 1, rng=rng, dtype=dtype)
        self.expand = Conv2dLayer(hidden, channels, 1, rng=rng, dtype=dtype)
        self.channels = channels

    def gates(self, x, inject=None, detach_params: bool = False) -> Tensor:
        x = lift(x)
        desc = global_avg_pool(x)
        if inject is not None:
            inject = lift(inject, x)
            if inject.shape[-1] != self.channels:
                raise ShapeError(f"inject has {inject.shape[-1]} channels, SE expects {self.channels}")
            desc = desc + inject
        # 1x1 convs act on the descriptor as a 1x1 image
        d = T.reshape(desc, (*desc.shape[:-1], 1, 1, self.channels))
        h = T.relu(self.reduce(d, detach_params))
        g = T.sigmoid(self.expand(h, detach_params))
        return g

    def forward(self, x, inject=None, detach_params: bool = False) -> Tensor:
        x = lift(x)
        return x * self.gates(x, inject, detach_params)


def se_forward(x, layer: SeLayer, inject=None) -> Tensor:
    return layer(x, inject)


class LkaLayer(Module):
    """5x5 depthwise -> 7x7 depthwise (dilation 3) -> 1x1, then gate the input."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        self.dw = Conv2dLayer(channels, channels, 5, groups=channels, rng=rng, dtype=dtype)
        self.dw_dilated = Conv2dLayer(channels, channels, 7, dilation=3, groups=channels,
                                      rng=rng, dtype=dtype)
        self.pw = Conv2dLayer(channels, channels, 1, rng=rng, dtype=dtype)

    receptive_field = 5 + 3 * (7 - 1)  # 23

    def attention(self, x, detach_params: bool = False) -> Tensor:
        a = self.dw(x, detach_params)
        a = self.dw_dilated(a, detach_params)
        return self.pw(a, detach_params)

    def forward(self, x, detach_params: bool = False) -> Tensor:
        x = lift(x)
        return self.attention(x, detach_params) * x


def lka_forward(x, layer: LkaLayer) -> Tensor:
    return layer(x)


class ConvReluConv(Module):
    """The Head/Tail pattern: Conv3x3 -> ReLU -> Conv3x3."""

    def __init__(self, cin: int, hidden: int, cout: int, zero_last: bool = False,
                 rng=None, dtype=np.float32):
        self.conv1 = Conv2dLayer(cin, hidden, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2dLayer(hidden, cout, 3, zero_init=zero_last, rng=rng, dtype=dtype)

    def forward(self, x) -> Tensor:
        return self.conv2(T.relu(self.conv1(x)))
