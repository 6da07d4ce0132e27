"""Image I/O, colour conversion and aligned/misaligned patch extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core.rng import make_rng
from .errors import ChannelMismatchError, ImageDecodeError, ShapeError

log = logging.getLogger(__name__)

SUPPORTED_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM as PPM


@dataclass
class ImageBuffer:
    """8-bit image stored as [h, w, c] with c in {1, 3}."""

    pixels: np.ndarray
    color: str = "L"

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ShapeError(f"image pixels must be [h, w, 1|3], got {px.shape}")
        if px.dtype != np.uint8:
            if np.any((px < 0) | (px > 255)):
                raise ValueError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px
        if self.color not in ("L", "RGB"):
            raise ValueError(f"unknown colour tag {self.color!r}")
        if (self.color == "L") != (px.shape[2] == 1):
            raise ChannelMismatchError(f"tag {self.color} does not match {px.shape[2]} channels")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def crop(self, top: int, left: int, h: int, w: int) -> "ImageBuffer":
        return ImageBuffer(self.pixels[top : top + h, left : left + w].copy(), self.color)

    def planes(self) -> np.ndarray:
        """Channel-first float32 copy, [c, h, w]."""
        return self.pixels.transpose(2, 0, 1).astype(np.float32)


def load_image(path: str | Path) -> ImageBuffer:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise ImageDecodeError(f"{path}: unsupported format {im.format}")
            im.load()
            if im.mode in ("L", "1", "P", "I;16", "I"):
                if im.mode == "P":
                    im = im.convert("RGB")
                else:
                    return ImageBuffer(np.asarray(im.convert("L")), "L")
            return ImageBuffer(np.asarray(im.convert("RGB")), "RGB")
    except FileNotFoundError as exc:
        raise ImageDecodeError(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageDecodeError):
            raise
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc


def save_image(image: ImageBuffer, path: str | Path) -> None:
    """Write PNG, or PGM/PPM when the suffix asks for it."""
    path = Path(path)
    px = image.pixels[:, :, 0] if image.channels == 1 else image.pixels
    im = Image.fromarray(px, mode="L" if image.channels == 1 else "RGB")
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG")


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 studio-swing Y in [16, 235] as float64 from [..., 3] RGB in [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return 16.0 + (65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2]) / 255.0


def to_luminance(image: ImageBuffer) -> ImageBuffer:
    if image.channels != 3:
        raise ChannelMismatchError(f"to_luminance needs 3 channels, got {image.channels}")
    y = rgb_to_luma(image.pixels)
    return ImageBuffer(np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8), "L")


def to_channels(image: ImageBuffer, channels: int) -> ImageBuffer:
    """Coerce an image to 1 (luminance) or 3 (RGB) channels."""
    if image.channels == channels:
        return image
    if channels == 1:
        return to_luminance(image)
    return ImageBuffer(np.repeat(image.pixels, 3, axis=2), "RGB")


# -- patches --------------------------------------------------------------------
@dataclass
class PatchRecord:
    gt: ImageBuffer
    degraded: ImageBuffer
    offset: tuple[int, int]  # (top, left)
    aligned: bool
    source: str = ""
    y_dct: np.ndarray | None = None  # quantized coefficients, aligned patches only


def is_aligned(top: int, left: int, size: int) -> bool:
    return top % 8 == 0 and left % 8 == 0 and size % 8 == 0


def grid_offsets(extent: int, size: int, stride: int) -> list[int]:
    return list(range(0, extent - size + 1, stride))


def extract_patches(
    gt: ImageBuffer,
    degraded: ImageBuffer,
    size: int,
    stride: int,
    seed: int,
    misaligned_fraction: float = 0.0,
    y_dct: np.ndarray | None = None,
    source: str = "",
) -> Iterator[PatchRecord]:
    """Yield congruent gt/degraded crops on a ``stride`` grid in seeded order.

    With ``misaligned_fraction`` > 0, that share of grid positions (chosen by
    the seed) is nudged by 1..7 pixels per axis so the stream carries both
    block-aligned and misaligned patches. ``degraded`` must be the
    full-image degradation; crops are never re-degraded.
    When ``y_dct`` ([c, by, bx, 8, 8] for the full image) is given, aligned
    records carry the matching sub-grid.
    """
    if gt.pixels.shape != degraded.pixels.shape:
        raise ShapeError(f"gt {gt.pixels.shape} and degraded {degraded.pixels.shape} differ")
    h, w = gt.height, gt.width
    if size > h or size > w:
        raise ShapeError(f"patch size {size} exceeds image {h}x{w}")
    if stride <= 0:
        raise ValueError("stride must be positive")
    rng = make_rng(seed, "patches", source)
    offsets = [(t, l) for t in grid_offsets(h, size, stride) for l in grid_offsets(w, size, stride)]
    order = rng.permutation(len(offsets))
    nudge = rng.random(len(offsets)) < misaligned_fraction
    shifts = rng.integers(1, 8, size=(len(offsets), 2))
    for k in order:
        top, left = offsets[k]
        if nudge[k]:
            top = _nudge(top, int(shifts[k, 0]), h - size)
            left = _nudge(left, int(shifts[k, 1]), w - size)
        aligned = is_aligned(top, left, size)
        sub = None
        if aligned and y_dct is not None:
            by, bx, nb = top // 8, left // 8, size // 8
            sub = y_dct[:, by : by + nb, bx : bx + nb]
        yield PatchRecord(
            gt.crop(top, left, size, size),
            degraded.crop(top, left, size, size),
            (top, left),
            aligned,
            source,
            sub,
        )


def _nudge(pos: int, shift: int, limit: int) -> int:
    if pos + shift <= limit:
        return pos + shift
    if pos - shift >= 0:
        return pos - shift
    return pos


# -- datasets -------------------------------------------------------------------
@dataclass
class Sample:
    name: str
    gt: ImageBuffer
    degraded: ImageBuffer
    y_dct: np.ndarray  # [c, by, bx, 8, 8] of the edge-padded image


def bundled_root(name: str = "toy") -> Path:
    """Directory of a dataset shipped with the package (``toy`` or ``eval``)."""
    root = resources.files("o2m") / "assets" / name
    return Path(str(root))


def list_images(directory: Path) -> list[Path]:
    exts = {".png", ".pgm", ".ppm"}
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)


def load_dataset(root: str | Path, quality: int, channels: int = 1, cache: bool = False) -> list[Sample]:
    """Load ``<root>/gt/*`` and degrade each image at ``quality``.

    With ``cache``, degraded images are also written to ``<root>/qNN/``
    and reused from there when present.
    """
    from .jpeg import jpeg_degrade

    root = Path(root)
    gt_dir = root / "gt"
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"{gt_dir}: dataset directory not found")
    paths = list_images(gt_dir)
    if not paths:
        raise FileNotFoundError(f"{gt_dir}: no images")
    cache_dir = root / f"q{quality:02d}"
    samples = []
    for path in paths:
        gt = to_channels(load_image(path), channels)
        degraded, grid, _ = jpeg_degrade(gt, quality)
        cached = cache_dir / (path.stem + ".png")
        if cache:
            if cached.exists():
                log.debug("using cached %s", cached)
                degraded = to_channels(load_image(cached), channels)
            else:
                cache_dir.mkdir(exist_ok=True)
                save_image(degraded, cached)
        samples.append(Sample(path.stem, gt, degraded, grid.coeffs))
    return samples
