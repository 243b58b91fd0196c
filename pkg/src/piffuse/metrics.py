"""PSNR, SSIM, SAM and ERGAS on [H, W, C] numpy cubes, plus a serialisable report."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def _arr(a):
    return np.asarray(getattr(a, "data", a), dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _arr(a), _arr(b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak ** 2 / mse))


def sam(a, b) -> tuple[float, np.ndarray]:
    """Mean spectral angle in degrees and the per-pixel angle map.

    Uses 2*atan2(|u - v|, |u + v|) on unit spectra, which is exact at 0 and
    well conditioned near 0 and 180 degrees, unlike arccos of the dot product.
    """
    a, b = _arr(a), _arr(b)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ok = (na[..., 0] > 0) & (nb[..., 0] > 0)
    u = a / np.where(na > 0, na, 1.0)
    v = b / np.where(nb > 0, nb, 1.0)
    angle = np.degrees(2.0 * np.arctan2(np.linalg.norm(u - v, axis=-1), np.linalg.norm(u + v, axis=-1)))
    angle = np.where(ok, angle, 0.0)
    return float(angle.mean()), angle


def ergas(ref, est, scale: float) -> float:
    ref, est = _arr(ref), _arr(est)
    if scale < 1:
        raise ValueError("scale must be >= 1")
    C = ref.shape[-1]
    ref2 = ref.reshape(-1, C)
    est2 = est.reshape(-1, C)
    mse = ((ref2 - est2) ** 2).mean(0)
    mu = ref2.mean(0)
    zero = mu == 0
    if zero.any():
        log.warning("ERGAS: %d band(s) with zero mean; using eps", int(zero.sum()))
        mu = np.where(zero, 1e-8, mu)
    return float(100.0 / scale * np.sqrt(np.mean(mse / mu ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM (valid-region Gaussian statistics); bands averaged."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for band in range(a.shape[-1]):
        x, y = a[..., band], b[..., band]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


CSV_COLUMNS = ["dataset", "scale", "psnr", "ssim", "sam", "ergas", "params", "ms_per_image"]


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    sam: float
    ergas: float
    sam_map: np.ndarray | None = field(default=None, repr=False)
    dataset: str = "synthetic"
    scale: int = 4
    params: int = 0
    ms_per_image: float = 0.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self, header: bool = False) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.to_dict())
        return buf.getvalue()


def evaluate(ref, est, scale: int, peak: float = 1.0, **extra) -> MetricsReport:
    """All four metrics for one cube (or the mean over a batch [B, H, W, C])."""
    ref, est = _arr(ref), _arr(est)
    if ref.ndim == 3:
        ref, est = ref[None], est[None]
    rows = []
    maps = []
    for r, e in zip(ref, est):
        s_mean, s_map = sam(r, e)
        ss = ssim(r, e, peak) if min(r.shape[:2]) >= 11 else float("nan")
        rows.append((psnr(r, e, peak), ss, s_mean, ergas(r, e, scale)))
        maps.append(s_map)
    m = np.mean(np.array(rows), axis=0)
    return MetricsReport(float(m[0]), float(m[1]), float(m[2]), float(m[3]),
                         sam_map=maps[0] if len(maps) == 1 else np.stack(maps), scale=scale, **extra)
