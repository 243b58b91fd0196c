"""Selective state-space scans and the segmented spectral Mamba module.

The recurrence for one channel ``c`` of one sequence is

    h_t = exp(delta_t[c] * a[c]) * h_{t-1} + delta_t[c] * B_t * x_t[c]
    y_t[c] = <C_t, h_t> + d[c] * x_t[c]

with ``delta = softplus(x W_delta + b_delta)``, ``B = x W_B``,
``C = x W_C`` (input-dependent, hence "selective") and ``a = -exp(log_a)``.

Many independent sequences (segments x scan directions) are stacked on a
leading group axis so that one Python loop over time serves all of them.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Conv2dLayer, Module
from .tensor import Parameter, ShapeError, Tensor, lift, make_op

# recurrence updates performed so far (element count), for complexity checks
scan_work = {"steps": 0, "updates": 0}


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


def _time_major(a):
    return np.ascontiguousarray(a.transpose(2, 0, 1, 3))


def selective_scan_op(x: Tensor, delta: Tensor, A: Tensor, Bm: Tensor, Cm: Tensor, D: Tensor) -> Tensor:
    """Fused selective scan with an exact adjoint.

    x, delta: [G, B, T, C]; A: [G, C, N]; Bm, Cm: [G, B, T, N]; D: [G, C].
    """
    G, Bsz, L, C = x.shape
    N = A.shape[-1]
    # time-major copies so each step touches one contiguous slab
    xt, dt = _time_major(x.data), _time_major(delta.data)
    Bt, Ct = _time_major(Bm.data), _time_major(Cm.data)
    Ab = A.data[None, :, None]                       # [1, G, 1, C, N]
    dA = np.exp(dt[..., None] * Ab)                  # [T, G, B, C, N]
    dx = dt * xt
    u = dx[..., None] * Bt[..., None, :]
    H = np.empty_like(u)
    h = np.zeros((G, Bsz, C, N), dtype=x.dtype)
    for t in range(L):
        h = dA[t] * h + u[t]
        H[t] = h
    scan_work["steps"] += L
    scan_work["updates"] += L * G * Bsz * C * N
    y = (H @ Ct[..., None])[..., 0].transpose(1, 2, 0, 3) + D.data[:, None, None, :] * x.data

    def bw(gy):
        gyt = _time_major(gy)
        src = gyt[..., None] * Ct[..., None, :]
        gH = np.empty_like(src)
        acc = src[L - 1]
        gH[L - 1] = acc
        for t in range(L - 2, -1, -1):
            acc = src[t] + dA[t + 1] * acc
            gH[t] = acc
        H_prev = np.concatenate([np.zeros_like(H[:1]), H[:-1]], axis=0)
        g_log = gH * H_prev * dA                     # adjoint of delta*A
        g_dx = (gH @ Bt[..., None])[..., 0]          # adjoint of delta*x
        gC = (np.swapaxes(H, -1, -2) @ gyt[..., None])[..., 0]
        gB = (np.swapaxes(gH, -1, -2) @ dx[..., None])[..., 0]
        gdt = g_dx * xt + (g_log * Ab).sum(-1)
        gA = (g_log * dt[..., None]).sum(axis=(0, 2))
        gxt = g_dx * dt
        back = lambda a: np.ascontiguousarray(a.transpose(1, 2, 0, 3))  # noqa: E731
        gx = back(gxt) + D.data[:, None, None, :] * gy
        gD = (gy * x.data).sum(axis=(1, 2))
        return gx, back(gdt), gA, back(gB), back(gC), gD

    return make_op(np.ascontiguousarray(y), (x, delta, A, Bm, Cm, D), bw, "selective_scan")


class SelectiveScanParams(Module):
    """Projections and decay for one scan direction over ``channels`` channels."""

    def __init__(self, channels: int, state: int = 8, rng=None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        std = 1.0 / math.sqrt(channels)
        self.w_delta = Parameter(rng.normal(0, std, (channels, channels)), dtype=dtype)
        self.b_delta = Parameter(np.full(channels, _softplus_inv(0.5)), dtype=dtype)
        self.w_b = Parameter(rng.normal(0, std, (channels, state)), dtype=dtype)
        self.w_c = Parameter(rng.normal(0, std, (channels, state)), dtype=dtype)
        self.log_a = Parameter(np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (channels, 1))),
                               dtype=dtype)
        self.d = Parameter(np.ones(channels), dtype=dtype)
        self.channels = channels
        self.state = state


def _scan_groups(seqs: Tensor, params: list[SelectiveScanParams]) -> Tensor:
    """seqs [G, B, T, C] with one parameter set per group -> [G, B, T, C]."""
    G = seqs.shape[0]
    if len(params) != G:
        raise ShapeError(f"{G} sequence groups but {len(params)} parameter sets")
    C = seqs.shape[-1]
    if any(p.channels != C for p in params):
        raise ShapeError(f"sequence width {C} does not match scan parameters")
    Wd = T.reshape(T.stack([p.w_delta for p in params]), (G, 1, C, C))
    bd = T.reshape(T.stack([p.b_delta for p in params]), (G, 1, 1, C))
    Wb = T.reshape(T.stack([p.w_b for p in params]), (G, 1, C, -1))
    Wc = T.reshape(T.stack([p.w_c for p in params]), (G, 1, C, -1))
    A = -T.exp(T.stack([p.log_a for p in params]))
    D = T.stack([p.d for p in params])
    delta = T.softplus(seqs @ Wd + bd)
    Bm = seqs @ Wb
    Cm = seqs @ Wc
    return selective_scan_op(seqs, delta, A, Bm, Cm, D)


def selective_scan_1d(x, p: SelectiveScanParams) -> Tensor:
    """Scan [T, C] (or batched [B, T, C]) along T."""
    x = lift(x)
    squeeze = x.ndim == 2
    seq = T.reshape(x, (1, 1, *x.shape) if squeeze else (1, *x.shape))
    y = _scan_groups(seq, [p])
    return T.reshape(y, x.shape)


def scan_orders(H: int, W: int) -> list[np.ndarray]:
    """Flattened-pixel visiting orders: row-major fwd/bwd, column-major fwd/bwd."""
    row = np.arange(H * W)
    col = row.reshape(H, W).T.reshape(-1)
    return [row, row[::-1].copy(), col, col[::-1].copy()]


def _ss2d_grouped(x: Tensor, params: list[SelectiveScanParams], segments: int) -> Tensor:
    """Four-direction scan of each channel segment; params ordered segment-major."""
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1, *x.shape))
    Bsz, H, W, C = x.shape
    L = H * W
    cs = C // segments
    flat = T.reshape(x, (Bsz, L, C))
    orders = scan_orders(H, W)
    paths = T.stack([T.permute_along(flat, o, axis=1) for o in orders])        # [4, B, L, C]
    paths = T.reshape(paths, (4, Bsz, L, segments, cs))
    seqs = T.reshape(T.transpose(paths, (3, 0, 1, 2, 4)), (segments * 4, Bsz, L, cs))
    ys = _scan_groups(seqs, params)
    ys = T.reshape(ys, (segments, 4, Bsz, L, cs))
    ys = T.reshape(T.transpose(ys, (1, 2, 3, 0, 4)), (4, Bsz, L, C))
    merged = None
    for k, o in enumerate(orders):
        back = T.permute_along(ys[k], np.argsort(o), axis=1)
        merged = back if merged is None else merged + back
    out = T.reshape(T.scale(merged, 0.25), (Bsz, H, W, C))
    return T.reshape(out, (H, W, C)) if squeeze else out


def ss2d_forward(x, params: list[SelectiveScanParams]) -> Tensor:
    """Average of four directional selective scans over an [H, W, C] map."""
    if len(params) != 4:
        raise ValueError("ss2d needs exactly four parameter sets")
    return _ss2d_grouped(lift(x), list(params), 1)


class Ss2d(Module):
    def __init__(self, channels: int, state: int = 8, rng=None, dtype=np.float32):
        self.directions = [SelectiveScanParams(channels, state, rng, dtype) for _ in range(4)]

    def forward(self, x) -> Tensor:
        return ss2d_forward(x, self.directions)


class SsmmBlock(Module):
    """Split channels in four, scan each quarter in 2D, concat, norm, 1x1 fuse, residual."""

    def __init__(self, channels: int, state: int = 8, zero_fuse: bool = True, rng=None,
                 dtype=np.float32):
        if channels % 4:
            raise ValueError(f"SSMM needs channels divisible by 4, got {channels}")
        seg = channels // 4
        self.segments = [Ss2d(seg, state, rng, dtype) for _ in range(4)]
        self.norm_gamma = Parameter(np.ones(channels), dtype=dtype)
        self.norm_beta = Parameter(np.zeros(channels), dtype=dtype)
        self.fuse = Conv2dLayer(channels, channels, 1, zero_init=zero_fuse, rng=rng, dtype=dtype)
        self.channels = channels

    def scan_features(self, x) -> Tensor:
        """Concatenated per-segment SS2D outputs (before norm and fuse)."""
        params = [p for seg in self.segments for p in seg.directions]
        return _ss2d_grouped(lift(x), params, 4)

    def forward(self, x) -> Tensor:
        x = lift(x)
        if x.shape[-1] != self.channels:
            raise ShapeError(f"SSMM built for {self.channels} channels, got {x.shape[-1]}")
        y = T.layer_norm(self.scan_features(x), self.norm_gamma, self.norm_beta)
        return x + self.fuse(y)


def ssmm_forward(x, block: SsmmBlock) -> Tensor:
    return block(x)
