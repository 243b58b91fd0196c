"""The two-branch fusion network and its checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .coupling import CouplingStack
from .famlora import FamLoraBlock
from .nn import Conv2dLayer, ConvReluConv, Module, bicubic_upsample
from .prior import HfSemanticPerception, PriorExtractor
from .tensor import ShapeError, Tensor, lift
from .wavelet import WaveletPyramid, haar_analyze, haar_synthesize

CHECKPOINT_MAGIC = b"PIFN"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


@dataclass
class PifNetConfig:
    bands: int = 31             # C, hyperspectral bands
    msi_bands: int = 4          # c, multispectral bands
    scale: int = 4              # s
    hidden: int = 64            # D
    blocks: int = 4             # L
    beta: float = 1.0
    rank: int = 4
    state: int = 8
    se_ratio: int = 4
    alpha: float = 2.0
    lambda_inv: float = 0.01
    lambda_cos: float = 0.1
    use_mamba: bool = True
    use_famlora: bool = True
    share_attention: bool = True
    freeze_second_pass: bool = True
    prior_local_mean: bool = True
    signed_logdet: bool = False
    cos_per_pixel: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.hidden % 4:
            raise ValueError(f"hidden width D={self.hidden} must be divisible by 4")
        if self.scale not in (2, 4, 8):
            raise ValueError(f"scale must be one of 2, 4, 8; got {self.scale}")
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if self.rank > self.hidden // 4:
            raise ValueError(f"LoRA rank {self.rank} exceeds head width {self.hidden // 4}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PifNetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **changes) -> "PifNetConfig":
        return dataclasses.replace(self, **changes)


class PifNet(Module):
    def __init__(self, cfg: PifNetConfig):
        self._cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        D, C, c = cfg.hidden, cfg.bands, cfg.msi_bands
        # spectral branch
        self.hsi_head = ConvReluConv(C, D, D, rng=rng, dtype=dt)
        self.proj = Conv2dLayer(D, D, 1, rng=rng, dtype=dt)
        self.hf_reduce = Conv2dLayer(3 * D, D, 1, rng=rng, dtype=dt)
        self.coupling = (CouplingStack.build(cfg.blocks, D, cfg.state, cfg.alpha, rng, dt)
                         if cfg.use_mamba else None)
        self.hf_expand = Conv2dLayer(D, 3 * D, 1, rng=rng, dtype=dt)
        self.spectral_tail = ConvReluConv(D, D, C, zero_last=True, rng=rng, dtype=dt)
        # guidance
        self.msi_head = ConvReluConv(c, D, D, rng=rng, dtype=dt)
        self.prior = PriorExtractor(D, cfg.beta, cfg.prior_local_mean, rng=rng, dtype=dt)
        self.hf_guidance = HfSemanticPerception(D, rng=rng, dtype=dt)
        # spatial branch
        self.fam = ([FamLoraBlock(D, cfg.rank, cfg.se_ratio, cfg.share_attention, rng, dt)
                     for _ in range(cfg.blocks)] if cfg.use_famlora else [])
        for blk in self.fam:
            blk.pass2_frozen = cfg.freeze_second_pass
        self.spatial_tail = ConvReluConv(D, D, C, zero_last=True, rng=rng, dtype=dt)

    @property
    def cfg(self) -> PifNetConfig:
        return self._cfg

    def to(self, dtype):
        super().to(dtype)
        self._cfg = self._cfg.replace(dtype=np.dtype(dtype).name)
        return self

    # -- branches -----------------------------------------------------------
    def _spectral(self, x: Tensor):
        s = self.cfg.scale
        x_up = bicubic_upsample(x, s)
        feats = self.proj(self.hsi_head(x_up))
        pyr = haar_analyze(feats)
        xh = self.hf_reduce(pyr.details())
        if self.coupling is not None:
            xh, ll, logdet = self.coupling(xh, pyr.ll)
        else:
            ll = pyr.ll
            logdet = T.Tensor(np.zeros(x.shape[0] if x.ndim == 4 else (), dtype=x.dtype))
        rec = haar_synthesize(WaveletPyramid.from_details(ll, self.hf_expand(xh)))
        z_bar = x_up + self.spectral_tail(rec)
        return z_bar, logdet, xh, x_up, feats

    def spectral_branch(self, x):
        """x [.., h, w, C] -> (z_bar [.., sh, sw, C], logdet, high-freq features [.., sh/2, sw/2, D])."""
        x = lift(x)
        if x.shape[-1] != self.cfg.bands:
            raise ShapeError(f"LR-HSI has {x.shape[-1]} bands, model expects {self.cfg.bands}")
        z_bar, logdet, xh, _, _ = self._spectral(x)
        return z_bar, logdet, xh

    def spatial_branch(self, y, guidance, x_r, ys=None, base=None) -> Tensor:
        """Trunk of FAM-LoRA blocks on MSI features + guidance, then the tail.

        ``ys`` reuses precomputed MSI head features; ``base`` is added to the
        tail output (the forward pass passes the upsampled LR-HSI).
        """
        y, guidance, x_r = lift(y), lift(guidance), lift(x_r)
        g = self.msi_head(y) if ys is None else ys
        if g.shape != guidance.shape:
            raise ShapeError(f"guidance {guidance.shape} does not match MSI features {g.shape}")
        g = g + guidance
        for blk in self.fam:
            g = blk(g, x_r)
        out = self.spatial_tail(g)
        return out if base is None else out + base

    def forward(self, x, y):
        """Returns (z_hat, z_bar, logdet)."""
        x, y = lift(x), lift(y)
        s = self.cfg.scale
        expect = (x.shape[-3] * s, x.shape[-2] * s)
        if y.shape[-3:-1] != expect:
            raise ShapeError(f"HR-MSI spatial size {y.shape[-3:-1]} != scale x LR size {expect}")
        if y.shape[-1] != self.cfg.msi_bands:
            raise ShapeError(f"HR-MSI has {y.shape[-1]} bands, model expects {self.cfg.msi_bands}")
        if x.shape[-1] != self.cfg.bands:
            raise ShapeError(f"LR-HSI has {x.shape[-1]} bands, model expects {self.cfg.bands}")
        if expect[0] % 2 or expect[1] % 2:
            raise ShapeError(f"upsampled size {expect} must be even for the wavelet stage")
        z_bar, logdet, xh, x_up, xs = self._spectral(x)
        ys = self.msi_head(y)
        x_r = self.prior(xs, ys)
        guidance = self.hf_guidance(xh, x_r)
        z_hat = self.spatial_branch(y, guidance, x_r, ys=ys, base=x_up)
        return z_hat, z_bar, logdet

    def coupled_elements(self, x_shape) -> int:
        """Elements per sample in one coupling stream (the log-det normaliser)."""
        h, w = x_shape[-3] * self.cfg.scale // 2, x_shape[-2] * self.cfg.scale // 2
        return h * w * self.cfg.hidden


def pifnet_forward(x, y, model: PifNet):
    return model(x, y)


def parameter_count(model: Module) -> int:
    return model.num_parameters()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: PifNet, path) -> None:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    params = list(model.named_parameters())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", DTYPE_CODES[p.dtype], p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype=p.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}: need {n} bytes, "
                                  f"{len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> PifNet:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at byte 0")
    version, cfg_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    cfg = PifNetConfig.from_dict(json.loads(r.take(cfg_len).decode()))
    model = PifNet(cfg)
    named = dict(model.named_parameters())
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BI")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} at byte {start}")
        shape = r.unpack(f"<{ndim}I")
        dt = CODE_DTYPES[code]
        data = np.frombuffer(r.take(int(np.prod(shape)) * dt.itemsize), dtype=dt.newbyteorder("<"))
        if name not in named:
            raise CheckpointError(f"unexpected parameter {name!r} at byte {start}")
        p = named[name]
        if tuple(shape) != p.shape:
            raise CheckpointError(f"parameter {name!r} has shape {tuple(shape)}, model expects {p.shape}")
        p.data = data.reshape(shape).astype(dt, copy=True)
        p.grad = np.zeros_like(p.data)
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after byte {r.pos}")
    return model
