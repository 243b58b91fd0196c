"""Synthetic scenes, Wald-protocol degradation, patching and the HSC1 cube format.

HSC1 layout (little-endian)::

    b"HSC1" | u32 H | u32 W | u32 C | u8 dtype (0 = f32, 1 = f64) | H*W*C samples, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

CUBE_MAGIC = b"HSC1"
_HEADER = struct.Struct("<4sIIIB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CubeFormatError(ValueError):
    pass


@dataclass
class HsiCube:
    data: np.ndarray                      # [H, W, C]
    provenance: str = "synthetic"
    abundances: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.data.shape

    @property
    def bands(self) -> int:
        return self.data.shape[-1]


@dataclass
class SpectralResponse:
    srf: np.ndarray                       # [c, C], row-stochastic

    def __post_init__(self):
        self.srf = np.asarray(self.srf, dtype=np.float64)
        if (self.srf < 0).any():
            raise ValueError("spectral response rows must be nonnegative")
        sums = self.srf.sum(1)
        if not np.allclose(sums, 1.0, atol=1e-7):
            raise ValueError(f"spectral response rows must sum to 1, got {sums}")

    @classmethod
    def block_average(cls, msi_bands: int, bands: int) -> "SpectralResponse":
        """Equal contiguous groups of HSI bands, averaged."""
        if msi_bands > bands:
            raise ValueError("more MSI bands than HSI bands")
        srf = np.zeros((msi_bands, bands))
        for i, grp in enumerate(np.array_split(np.arange(bands), msi_bands)):
            srf[i, grp] = 1.0 / len(grp)
        return cls(srf)

    @property
    def msi_bands(self) -> int:
        return self.srf.shape[0]


@dataclass
class FusionSample:
    z: np.ndarray         # [p, p, C] ground truth
    x: np.ndarray         # [p/s, p/s, C] LR-HSI
    y: np.ndarray         # [p, p, c] HR-MSI
    scale: int
    origin: tuple[int, int] = (0, 0)


def normalize(cube: np.ndarray) -> np.ndarray:
    """Global min-max to [0, 1]."""
    lo, hi = float(cube.min()), float(cube.max())
    if not np.isfinite([lo, hi]).all():
        raise ValueError("cube contains non-finite values")
    if hi == lo:
        return np.zeros_like(cube)
    return (cube - lo) / (hi - lo)


def _smooth_field(rng, H, W, sigma) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((H, W)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def synth_scene(seed: int, H: int, W: int, C: int, complexity: int = 3,
                dtype=np.float32) -> HsiCube:
    """Linear mixture of ``complexity + 1`` smooth endmember spectra.

    Abundances come from blurred Voronoi cells with Dirichlet mixtures,
    lightly textured, and sum to one per pixel.  Complexity 0 gives a single
    endmember and a spatially constant cube.
    """
    for n in (H, W):
        if n < 1 or n & (n - 1):
            raise ValueError(f"scene sides must be powers of two, got {H}x{W}")
    if C < 4:
        raise ValueError("need at least 4 bands")
    rng = np.random.default_rng(seed)
    K = int(complexity) + 1
    knots = np.linspace(0, C - 1, 6)
    bands = np.arange(C)
    ends = np.stack([CubicSpline(knots, rng.uniform(0.1, 1.0, 6))(bands) for _ in range(K)])
    ends = np.clip(ends, 0.02, None)
    if K == 1:
        abund = np.ones((H, W, 1))
        cube = np.broadcast_to(ends[0], (H, W, C)).copy()
    else:
        n_cells = 4 * K
        centers = rng.uniform(0, [H, W], size=(n_cells, 2))
        mixes = rng.dirichlet(np.full(K, 0.3), size=n_cells)
        mixes[np.arange(n_cells), rng.permutation(np.arange(n_cells) % K)] += 1.0
        mixes /= mixes.sum(1, keepdims=True)
        rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        d2 = (rr[..., None] - centers[:, 0]) ** 2 + (cc[..., None] - centers[:, 1]) ** 2
        abund = mixes[np.argmin(d2, axis=-1)]
        abund = np.stack([gaussian_filter(abund[..., k], 0.7) for k in range(K)], axis=-1)
        texture = np.stack([_smooth_field(rng, H, W, 2.0) for _ in range(K)], axis=-1)
        abund = abund * np.exp(0.25 * texture)
        abund /= abund.sum(-1, keepdims=True)
        shading = 1.0 + 0.1 * _smooth_field(rng, H, W, 6.0)
        cube = shading[..., None] * (abund @ ends)
        profile = gaussian_filter(rng.standard_normal(C), 2.0)
        cube += 0.004 * (rng.standard_normal((H, W, 1)) * profile + 0.3 * rng.standard_normal((H, W, C)))
    return HsiCube(normalize(cube).astype(dtype), "synthetic", abund)


def gaussian_kernel3(sigma: float = 0.5) -> np.ndarray:
    r = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def blur3(z: np.ndarray, sigma: float = 0.5) -> np.ndarray:
    """Per-band 3x3 Gaussian blur with edge clamping."""
    k = gaussian_kernel3(sigma)
    zp = np.pad(z, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = z.shape[:2]
    out = np.zeros_like(z, dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out += k[i, j] * zp[i:i + H, j:j + W]
    return out.astype(z.dtype)


def degrade_lrhsi(z, s: int, mode: str = "decimate", sigma: float = 0.5) -> np.ndarray:
    """Blur then downsample by ``s`` (keep each block's top-left sample, or average it)."""
    z = np.asarray(getattr(z, "data", z))
    H, W = z.shape[:2]
    if H % s or W % s:
        raise ValueError(f"{H}x{W} is not divisible by scale {s}")
    b = blur3(z, sigma)
    if s == 1:
        return b
    if mode == "decimate":
        return np.ascontiguousarray(b[::s, ::s])
    if mode == "average":
        return b.reshape(H // s, s, W // s, s, -1).mean(axis=(1, 3)).astype(z.dtype)
    raise ValueError(f"unknown downsampling mode {mode!r}")


def simulate_hrmsi(z, srf: SpectralResponse) -> np.ndarray:
    z = np.asarray(getattr(z, "data", z))
    if srf.srf.shape[1] != z.shape[-1]:
        raise ValueError(f"SRF has {srf.srf.shape[1]} columns, cube has {z.shape[-1]} bands")
    return (z @ srf.srf.T).astype(z.dtype)


def make_sample(z: np.ndarray, s: int, srf: SpectralResponse, origin=(0, 0),
                mode: str = "decimate") -> FusionSample:
    return FusionSample(z, degrade_lrhsi(z, s, mode), simulate_hrmsi(z, srf), s, origin)


def extract_patches(z, p: int, stride: int, s: int, srf: SpectralResponse,
                    region: tuple[int, int, int, int] | None = None,
                    mode: str = "decimate", limit: int | None = None) -> list[FusionSample]:
    """Raster-order crops inside ``region = (row0, row1, col0, col1)``."""
    data = np.asarray(getattr(z, "data", z))
    H, W = data.shape[:2]
    r0, r1, c0, c1 = region if region is not None else (0, H, 0, W)
    if p % s:
        raise ValueError(f"patch size {p} not divisible by scale {s}")
    if p > r1 - r0 or p > c1 - c0:
        raise ValueError(f"patch size {p} exceeds region {r1 - r0}x{c1 - c0}")
    out = []
    for r in range(r0, r1 - p + 1, stride):
        for c in range(c0, c1 - p + 1, stride):
            out.append(make_sample(data[r:r + p, c:c + p], s, srf, (r, c), mode))
            if limit is not None and len(out) >= limit:
                return out
    return out


def split_regions(H: int, W: int, test_rows: int):
    """Train on the top rows, test on the bottom ``test_rows`` rows (disjoint)."""
    if not 0 < test_rows < H:
        raise ValueError("test_rows must leave a non-empty training region")
    return (0, H - test_rows, 0, W), (H - test_rows, H, 0, W)


def collate(samples: list[FusionSample]):
    """Stack into batched arrays (x [B,h,w,C], y [B,H,W,c], z [B,H,W,C])."""
    return (np.stack([s.x for s in samples]), np.stack([s.y for s in samples]),
            np.stack([s.z for s in samples]))


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

DEFAULT_MANIFEST = {
    "scene": {"seed": 7, "height": 128, "width": 128, "bands": 16, "complexity": 3},
    "cube": None,            # path to a user-supplied HSC1 cube (overrides "scene")
    "scale": 4,
    "msi_bands": 4,
    "srf": "block",          # or an explicit [c, C] matrix
    "patch": 32,
    "train_stride": 16,
    "test_stride": 32,
    "test_rows": 32,
    "max_train": 32,
    "downsample": "decimate",
}


def load_manifest(path) -> dict:
    m = dict(DEFAULT_MANIFEST)
    m.update(json.loads(Path(path).read_text()))
    if m.get("cube"):
        cube_path = Path(m["cube"])
        if not cube_path.is_absolute():
            m["cube"] = str(Path(path).parent / cube_path)
    return m


def build_dataset(manifest: dict | None = None):
    """Return (train samples, test samples, SpectralResponse)."""
    m = dict(DEFAULT_MANIFEST)
    m.update(manifest or {})
    if m.get("cube"):
        cube = HsiCube(normalize(read_cube(m["cube"])), "user-supplied")
    else:
        sc = m["scene"]
        cube = synth_scene(sc["seed"], sc["height"], sc["width"], sc["bands"], sc.get("complexity", 3))
    C = cube.bands
    srf = (SpectralResponse.block_average(m["msi_bands"], C) if m["srf"] == "block"
           else SpectralResponse(np.asarray(m["srf"])))
    H, W = cube.shape[:2]
    train_reg, test_reg = split_regions(H, W, m["test_rows"])
    train = extract_patches(cube, m["patch"], m["train_stride"], m["scale"], srf, train_reg,
                            m["downsample"], m.get("max_train"))
    test = extract_patches(cube, m["patch"], m["test_stride"], m["scale"], srf, test_reg,
                           m["downsample"])
    return train, test, srf


# ---------------------------------------------------------------------------
# HSC1 I/O
# ---------------------------------------------------------------------------

def write_cube(path, cube) -> None:
    data = np.asarray(getattr(cube, "data", cube))
    if data.ndim != 3:
        raise ValueError(f"cube must be [H, W, C], got {data.shape}")
    if data.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {data.dtype}")
    code = _CODES[data.dtype]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CUBE_MAGIC, *data.shape, code))
        fh.write(np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes())


def read_cube(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CubeFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, H, W, C, code = _HEADER.unpack_from(buf)
    if magic != CUBE_MAGIC:
        raise CubeFormatError(f"bad magic {magic!r} at byte offset 0")
    if code not in _DTYPES:
        raise CubeFormatError(f"unknown dtype code {code} at byte offset 16")
    dt = _DTYPES[code]
    expected = H * W * C * dt.itemsize
    actual = len(buf) - _HEADER.size
    if actual != expected:
        raise CubeFormatError(f"payload at byte offset {_HEADER.size}: expected {expected} bytes, got {actual}")
    arr = np.frombuffer(buf, dtype=dt, offset=_HEADER.size).reshape(H, W, C)
    return arr.astype(dt.newbyteorder("="), copy=True)


def cube_io(path, cube=None):
    """Write ``cube`` to ``path`` if given, otherwise read and return it."""
    if cube is None:
        return read_cube(path)
    write_cube(path, cube)
    return None
