"""
Full-reference quality metrics: PSNR, SSIM and PSNR-B.

PSNR-B is the blocking-effect-aware PSNR variant. For a test image ``y``
of width ``N_H`` and height ``N_V`` with block size ``B``:

    D_B   = mean of squared differences between horizontally / vertically
            adjacent pixels that straddle a block boundary
    D_B^c = the same mean over all other adjacent pairs
    BEF   = eta * (D_B - D_B^c) if D_B > D_B^c else 0
    eta   = log2(B) / log2(min(N_H, N_V))
    PSNR-B = 10 log10(255^2 / (MSE + BEF))

Only the test image enters BEF, so BEF >= 0 and PSNR-B <= PSNR. A worked
example is in docs/metrics.md.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CAP = 99.0
CSV_HEADER = ("image", "quality", "approach", "psnr", "ssim", "psnrb")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    from .data import ImageBuffer

    if isinstance(a, ImageBuffer):
        a = a.pixels
    if isinstance(b, ImageBuffer):
        b = b.pixels
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3 and a.shape[2] == 1:
        a, b = a[:, :, 0], b[:, :, 0]
    return a, b


def _db(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def psnr(a, b) -> float:
    """PSNR in dB for 8-bit images; identical images report 99 dB."""
    a, b = _pair(a, b)
    return _db(float(np.mean((a - b) ** 2)))


def ssim(a, b, window: int = 8, k1: float = 0.01, k2: float = 0.03, data_range: float = 255.0) -> float:
    """Mean SSIM over all ``window`` x ``window`` uniform windows (stride 1).

    Colour inputs are scored per channel and averaged.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., i], b[..., i], window, k1, k2, data_range) for i in range(a.shape[2])]))
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def local_mean(x):
        return sliding_window_view(x, (window, window)).mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def blocking_effect_factor(img, block: int = 8) -> float:
    """BEF of a single-channel image (see module docstring)."""
    y = np.asarray(img, dtype=np.float64)
    if y.ndim == 3:
        return float(np.mean([blocking_effect_factor(y[..., i], block) for i in range(y.shape[2])]))
    nv, nh = y.shape
    dh = (y[:, :-1] - y[:, 1:]) ** 2  # pair (j, j+1)
    dv = (y[:-1, :] - y[1:, :]) ** 2
    h_boundary = (np.arange(1, nh) % block) == 0
    v_boundary = (np.arange(1, nv) % block) == 0
    n_b = h_boundary.sum() * nv + v_boundary.sum() * nh
    n_bc = (~h_boundary).sum() * nv + (~v_boundary).sum() * nh
    if n_b == 0 or n_bc == 0:
        return 0.0
    d_b = (dh[:, h_boundary].sum() + dv[v_boundary, :].sum()) / n_b
    d_bc = (dh[:, ~h_boundary].sum() + dv[~v_boundary, :].sum()) / n_bc
    if d_b <= d_bc:
        return 0.0
    eta = math.log2(block) / math.log2(min(nh, nv))
    return float(eta * (d_b - d_bc))


def psnr_b(reference, test, block: int = 8) -> float:
    """PSNR-B in dB: PSNR with the test image's blocking effect added to the MSE."""
    a, b = _pair(reference, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return _db(mse + blocking_effect_factor(b, block))


@dataclass
class MetricReport:
    image: str
    quality: int | str
    approach: str
    psnr: float
    ssim: float
    psnrb: float

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")


def evaluate(reference, test, image: str = "", quality: int | str = "", approach: str = "") -> MetricReport:
    return MetricReport(image, quality, approach, psnr(reference, test), ssim(reference, test), psnr_b(reference, test))


def append_csv(path: str | Path, rows: list[MetricReport]) -> None:
    """Append rows, writing the header first when the file is new or empty."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CSV_HEADER)
        for r in rows:
            d = asdict(r)
            writer.writerow([d["image"], d["quality"], d["approach"], f"{r.psnr:.4f}", f"{r.ssim:.6f}", f"{r.psnrb:.4f}"])
