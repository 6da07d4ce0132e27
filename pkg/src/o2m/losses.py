"""
Loss terms of the measurement component and the training-log writer.

    L = L_percept + lambda1 * L_natural + lambda2 * L_jpeg

``xhat`` and ``x`` are model-range tensors ([-1, 1], NCHW). ``jpeg_loss``
works in pixel units because the quantization band is defined there;
``combined_loss`` does the conversion. Every term is averaged over the batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .core.tensor import Tensor, clip, log, mean, no_grad, relu, square, tsum
from .errors import ShapeError
from .jpeg import DctBlockGrid, QuantTable, dct_blocks

PROB_EPS = 1e-7
LOG_COLUMNS = ("step", "l_percept", "l_natural", "l_jpeg", "l_total", "l_D")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # naturalness
    lambda2_aligned: float = 0.1  # JPEG term, block-aligned patches
    lambda2_misaligned: float = 0.0  # JPEG term, all other patches

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    """One training-log row; ``None`` marks a term that was not computed."""

    l_percept: float
    l_natural: Optional[float]
    l_jpeg: float
    l_total: float
    l_D: Optional[float] = None
    step: int = 0
    lambda2: float = 0.0  # effective JPEG weight: l_total = l_percept + lambda1 * l_natural + lambda2 * l_jpeg

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.step), fmt(self.l_percept), fmt(self.l_natural), fmt(self.l_jpeg), fmt(self.l_total), fmt(self.l_D)]


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"loss inputs differ in shape: {a.shape} vs {b.shape}")


def perceptual_loss(xhat: Tensor, x: Tensor, fe) -> Tensor:
    """Mean squared distance between feature maps of ``fe`` (treated as fixed)."""
    _check_pair(xhat, x)
    with no_grad():
        target = fe.features(x).data
    return mean(square(fe.features(xhat) - Tensor(target)))


def _prob(p: Tensor) -> Tensor:
    return clip(p, PROB_EPS, 1.0 - PROB_EPS)


def naturalness_loss(xhat: Tensor, D) -> Tensor:
    """Batch mean of -log D(xhat); D's parameters receive gradient only if enabled."""
    return mean(-log(_prob(D(xhat))))


def discriminator_loss(x_real: Tensor, xhat: Tensor, D) -> Tensor:
    """Binary cross-entropy with real -> 1 and reconstructed -> 0. ``xhat`` is detached."""
    _check_pair(x_real, xhat)
    p_real = _prob(D(x_real))
    p_fake = _prob(D(xhat.detach()))
    return mean(-(log(p_real) + log(1.0 - p_fake)))


def _q_array(Q, channels: int) -> np.ndarray:
    if isinstance(Q, QuantTable):
        q = Q.q
    else:
        q = np.asarray(Q)
    q = np.asarray(q, dtype=np.float64)
    if q.shape == (8, 8):
        q = np.broadcast_to(q, (channels, 8, 8))
    if q.shape != (channels, 8, 8):
        raise ShapeError(f"quantization tables {q.shape} do not fit {channels} channels")
    return q


def jpeg_loss(xhat: Tensor, y_dct, Q, reduce: str = "mean") -> Tensor:
    """Truncated L2 on block-DCT coefficients leaving the band Y +/- Q/2.

    ``xhat`` is [n, c, h, w] or [c, h, w] in pixel units with h, w multiples
    of 8 on the JPEG grid; ``y_dct`` the matching quantized coefficients
    [(n,) c, h/8, w/8, 8, 8]. Each image's sum is divided by its element
    count. ``reduce='none'`` returns the per-image values [n].
    """
    if isinstance(y_dct, DctBlockGrid):
        y_dct = y_dct.coeffs
    y = np.asarray(y_dct)
    single = xhat.ndim == 3
    if single:
        xhat = xhat.reshape(1, *xhat.shape)
        y = y[None]
    n, c, h, w = xhat.shape
    if h % 8 or w % 8:
        raise ShapeError(f"jpeg_loss needs dimensions that are multiples of 8, got {h}x{w}")
    if y.shape != (n, c, h // 8, w // 8, 8, 8):
        raise ShapeError(f"coefficients {y.shape} do not match image {xhat.shape}")
    dtype = xhat.dtype
    half_q = (_q_array(Q, c) / 2.0)[None, :, None, None]
    coeffs = dct_blocks(xhat - 128.0)
    excess = relu(square(coeffs - Tensor(y.astype(dtype))) - Tensor((half_q**2).astype(dtype)))
    per_image = tsum(excess.reshape(n, -1), axis=1) * (1.0 / (c * h * w))
    if reduce == "none":
        return per_image
    if reduce != "mean":
        raise ValueError(f"reduce must be 'mean' or 'none', got {reduce!r}")
    return mean(per_image)


def _pixels(t: Tensor) -> Tensor:
    return (t + 1.0) * 127.5


def combined_loss(xhat: Tensor, x: Tensor, y_dct, Q, aligned, w: LossWeights, fe, D=None):
    """Weighted sum of the three terms and a :class:`LossReport`.

    ``aligned`` is a bool or one bool per patch and picks each patch's
    lambda2. ``l_jpeg`` is the batch mean of the per-patch JPEG losses of
    patches whose lambda2 is non-zero (others count as 0). The report's
    ``lambda2`` is the weight that reproduces the total from ``l_jpeg``.
    With ``D=None`` or ``lambda1 == 0`` the naturalness term is not
    evaluated and is reported as ``None``. ``y_dct`` may be ``None`` when
    every lambda2 is zero.
    """
    _check_pair(xhat, x)
    n = xhat.shape[0]
    flags = np.broadcast_to(np.asarray(aligned, dtype=bool), (n,))
    lam = np.where(flags, w.lambda2_aligned, w.lambda2_misaligned)

    total = perceptual_loss(xhat, x, fe)
    l_percept = total.item()

    l_natural = None
    if D is not None and w.lambda1 > 0:
        nat = naturalness_loss(xhat, D)
        l_natural = nat.item()
        total = total + w.lambda1 * nat

    l_jpeg, lambda2 = 0.0, 0.0
    idx = np.flatnonzero(lam > 0)
    if len(idx):
        if y_dct is None:
            raise ValueError("y_dct is required when a patch has a non-zero JPEG weight")
        sub = xhat if len(idx) == n else xhat[idx]
        per_patch = jpeg_loss(_pixels(sub), np.asarray(y_dct)[idx], Q, reduce="none")
        weights = lam[idx]
        if np.all(weights == weights[0]):
            gated = tsum(per_patch) * (1.0 / n)
            total = total + float(weights[0]) * gated
            l_jpeg, lambda2 = gated.item(), float(weights[0])
        else:
            values = per_patch.data.astype(np.float64)
            total = total + tsum(per_patch * Tensor(weights.astype(xhat.dtype))) * (1.0 / n)
            l_jpeg = float(values.sum() / n)
            lambda2 = float((weights * values).sum() / values.sum()) if values.sum() > 0 else float(weights.max())
    report = LossReport(l_percept, l_natural, l_jpeg, total.item(), lambda2=lambda2)
    return total, report


class TrainingLog:
    """CSV writer with columns step, l_percept, l_natural, l_jpeg, l_total, l_D."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, report: LossReport) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(report.row())


def read_log(path: str | Path) -> list[dict[str, Optional[float]]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else None) for k, v in r.items()} for r in rows]
