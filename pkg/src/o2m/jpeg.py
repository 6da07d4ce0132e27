"""
JPEG degradation modelled in the DCT domain.

Images are split into 8x8 blocks, level-shifted by 128, transformed with an
orthonormal 2-D DCT-II, divided by a quantization table, rounded half away
from zero and multiplied back. No entropy coding is performed: it is
lossless and does not change the decoded pixels.

Coefficient grids have shape ``[..., blocks_y, blocks_x, 8, 8]``; the leading
axes are channels (and batch, for training tensors).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core.tensor import Function, Tensor
from .errors import ShapeError

BLOCK = 8

# Baseline luminance table (ITU-T T.81, Annex K), natural row-major order.
BASE_LUMINANCE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` so that ``C @ block @ C.T`` is the 2-D DCT."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    c[0] /= np.sqrt(2.0)
    return c


_C64 = dct_matrix()


@dataclass(frozen=True)
class QuantTable:
    q: np.ndarray
    quality: int

    def __post_init__(self):
        if self.q.shape != (BLOCK, BLOCK):
            raise ShapeError(f"quantization table must be 8x8, got {self.q.shape}")
        if np.any(self.q < 1):
            raise ValueError("quantization table entries must be >= 1")


@dataclass
class DctBlockGrid:
    """Block DCT coefficients plus the size of the image they came from."""

    coeffs: np.ndarray
    height: int
    width: int

    @property
    def blocks(self) -> tuple[int, int]:
        return self.coeffs.shape[-4], self.coeffs.shape[-3]


def quant_table(quality: int) -> QuantTable:
    """IJG quality scaling of the baseline luminance table, clamped to [1, 255]."""
    if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
        raise ValueError(f"quality must be an integer in [1, 100], got {quality!r}")
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality
    q = (BASE_LUMINANCE * scale + 50) // 100
    return QuantTable(np.clip(q, 1, 255), int(quality))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# -- block transforms on plain arrays -------------------------------------
def _to_blocks(x: np.ndarray) -> np.ndarray:
    *lead, h, w = x.shape
    if h % BLOCK or w % BLOCK:
        raise ShapeError(f"block DCT needs dimensions divisible by 8, got {h}x{w}")
    x = x.reshape(*lead, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
    return np.swapaxes(x, -3, -2)


def _from_blocks(b: np.ndarray) -> np.ndarray:
    *lead, by, bx, _, _ = b.shape
    return np.swapaxes(b, -3, -2).reshape(*lead, by * BLOCK, bx * BLOCK)


def dct2_blocks(x: np.ndarray) -> np.ndarray:
    """Orthonormal 8x8 DCT of ``x`` [..., h, w] -> [..., by, bx, 8, 8] (no level shift)."""
    c = _C64.astype(x.dtype) if x.dtype == np.float32 else _C64
    return c @ _to_blocks(x) @ c.T


def idct2_blocks(b: np.ndarray) -> np.ndarray:
    c = _C64.astype(b.dtype) if b.dtype == np.float32 else _C64
    return _from_blocks(c.T @ b @ c)


def pad_to_blocks(pixels: np.ndarray) -> np.ndarray:
    """Edge-replicate the last two axes up to multiples of 8."""
    h, w = pixels.shape[-2:]
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    if ph == 0 and pw == 0:
        return pixels
    widths = [(0, 0)] * (pixels.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(pixels, widths, mode="edge")


def _planes(image) -> tuple[np.ndarray, str | None]:
    """Return a float64 [c, h, w] view of an image-like object."""
    from .data import ImageBuffer

    if isinstance(image, ImageBuffer):
        return image.pixels.transpose(2, 0, 1).astype(np.float64), image.color
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], None
    if arr.ndim == 3:
        return arr, None
    raise ShapeError(f"expected a 2-D or channel-first 3-D image, got shape {arr.shape}")


def block_dct(image, level_shift: float = 128.0) -> DctBlockGrid:
    """Level-shifted block DCT of an image whose sides are multiples of 8.

    ``image`` is an :class:`~o2m.data.ImageBuffer`, a 2-D array, or a
    channel-first [c, h, w] array. Coefficients come back as [c, by, bx, 8, 8].
    """
    planes, _ = _planes(image)
    h, w = planes.shape[-2:]
    return DctBlockGrid(dct2_blocks(planes - level_shift), h, w)


def block_idct(grid: DctBlockGrid, level_shift: float = 128.0):
    """Inverse of :func:`block_dct`: an 8-bit ImageBuffer (rounded, clamped to [0, 255])."""
    from .data import ImageBuffer

    planes = np.clip(np.floor(decode_dct(grid, level_shift) + 0.5), 0, 255).astype(np.uint8)
    return ImageBuffer(np.ascontiguousarray(planes.transpose(1, 2, 0)), "L" if planes.shape[0] == 1 else "RGB")


def quantize(coeffs: np.ndarray, tables: Sequence[QuantTable] | QuantTable) -> np.ndarray:
    """``ROUND(X / Q) * Q`` per channel, with half-away-from-zero rounding."""
    qs = _stack_tables(tables, coeffs.shape[0])
    return round_half_away(coeffs / qs) * qs


def _stack_tables(tables, channels: int) -> np.ndarray:
    if isinstance(tables, QuantTable):
        tables = [tables] * channels
    if len(tables) != channels:
        raise ShapeError(f"{len(tables)} quantization tables for {channels} channels")
    return np.stack([t.q.astype(np.float64) for t in tables])[:, None, None]


def jpeg_degrade(image, quality: int, tables: Sequence[QuantTable] | None = None):
    """Simulate JPEG compression at ``quality``.

    Returns ``(degraded ImageBuffer, quantized DctBlockGrid, QuantTable)``.
    Every channel uses the scaled luminance table unless ``tables`` gives one
    per channel. Images are edge-padded to block multiples before the DCT
    and cropped back afterwards; the returned grid covers the padded image.
    """
    from .data import ImageBuffer

    table = quant_table(quality)
    planes, color = _planes(image)
    c, h, w = planes.shape
    padded = pad_to_blocks(planes)
    coeffs = dct2_blocks(padded - 128.0)
    y_coeffs = quantize(coeffs, tables if tables is not None else table)
    decoded = idct2_blocks(y_coeffs) + 128.0
    pixels = np.clip(np.floor(decoded[:, :h, :w] + 0.5), 0, 255).astype(np.uint8)
    if color is None:
        color = "L" if c == 1 else "RGB"
    out = ImageBuffer(np.ascontiguousarray(pixels.transpose(1, 2, 0)), color)
    return out, DctBlockGrid(y_coeffs, padded.shape[1], padded.shape[2]), table


def decode_dct(grid: DctBlockGrid, level_shift: float = 128.0) -> np.ndarray:
    """Real-valued decode of a coefficient grid: [c, h, w] pixels, no rounding or clamp."""
    coeffs = grid.coeffs if grid.coeffs.ndim == 5 else grid.coeffs[None]
    return idct2_blocks(coeffs) + level_shift


@dataclass(frozen=True)
class RangeReport:
    violations: int
    max_excess: float


def dct_range_check(xhat_dct, y_dct, q, slack: float = 0.0) -> RangeReport:
    """Count coefficients outside ``Y^dct +/- Q/2`` and the largest overshoot.

    ``xhat_dct`` and ``y_dct`` are congruent coefficient arrays (or grids);
    ``q`` is a :class:`QuantTable` or an 8x8 array broadcast over blocks.
    """
    a = xhat_dct.coeffs if isinstance(xhat_dct, DctBlockGrid) else np.asarray(xhat_dct)
    b = y_dct.coeffs if isinstance(y_dct, DctBlockGrid) else np.asarray(y_dct)
    if a.shape != b.shape:
        raise ShapeError(f"coefficient grids differ: {a.shape} vs {b.shape}")
    qv = q.q if isinstance(q, QuantTable) else np.asarray(q)
    excess = np.abs(a - b) - qv / 2.0
    bad = excess > slack
    return RangeReport(int(bad.sum()), float(excess[bad].max()) if bad.any() else 0.0)


# -- differentiable block DCT -----------------------------------------------
class BlockDCTFn(Function):
    """Orthonormal block DCT of [..., h, w] -> [..., by, bx, 8, 8]."""

    def forward(self, x):
        self.shape = x.shape
        return dct2_blocks(x)

    def backward(self, g):
        # the transform is orthonormal, so its adjoint is its inverse
        return (idct2_blocks(g).reshape(self.shape),)


def dct_blocks(x: Tensor) -> Tensor:
    return BlockDCTFn.apply(x)


# -- binary coefficient dump ---------------------------------------------------
DCT_MAGIC = b"O2MDCT1\0"


def save_dct_grid(path: str | Path, grid: DctBlockGrid, quality: int = 0) -> None:
    """Write a grid as laid out in docs/checkpoint.md: 32-byte header, then float32 LE coefficients."""
    coeffs = np.asarray(grid.coeffs)
    if coeffs.ndim == 4:
        coeffs = coeffs[None]
    c, by, bx = coeffs.shape[:3]
    header = DCT_MAGIC + struct.pack("<6i", grid.height, grid.width, c, quality, by, bx)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(coeffs.astype("<f4").tobytes())


def load_dct_grid(path: str | Path) -> tuple[DctBlockGrid, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 32 or raw[:8] != DCT_MAGIC:
        raise ValueError(f"{path}: not a DCT grid dump")
    h, w, c, quality, by, bx = struct.unpack("<6i", raw[8:32])
    count = c * by * bx * 64
    body = raw[32:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: expected {4 * count} coefficient bytes, found {len(body)}")
    coeffs = np.frombuffer(body, dtype="<f4").reshape(c, by, bx, BLOCK, BLOCK)
    return DctBlockGrid(coeffs.astype(np.float32), h, w), quality
