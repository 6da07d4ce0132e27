"""Regenerate the bundled toy/ and eval/ image sets.

Crops luminance tiles from the sample photographs that ship with
scikit-image (needed only for this script, not by the package) and writes
them to src/o2m/assets/{toy,eval}/gt/: 32 training tiles of 256x256 and
24 evaluation tiles of 128x128. Output is deterministic.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
import skimage.data as samples

from o2m.core.rng import make_rng
from o2m.data import ImageBuffer, save_image, to_luminance

SOURCES = (
    "astronaut", "camera", "coffee", "chelsea", "coins", "moon", "grass", "gravel",
    "brick", "rocket", "immunohistochemistry", "clock", "stereo_motorcycle", "cell",
    "retina",
)
SPLITS = {"toy": (32, 256, 4), "eval": (24, 128, 2)}  # count, tile size, max tiles per source


def luminance(name: str) -> np.ndarray:
    img = getattr(samples, name)()
    if isinstance(img, tuple):
        img = img[0]
    if name == "retina":  # drop the black surround
        img = img[300:1100, 300:1100]
    if img.ndim == 3:
        return to_luminance(ImageBuffer(img[..., :3], "RGB")).pixels[..., 0]
    return img


def tiles(size: int, per_source: int, seed: int = 0) -> list[tuple[str, np.ndarray]]:
    out = []
    for name in SOURCES:
        img = luminance(name)
        rng = make_rng(seed, "tiles", name, size)
        rows, cols = img.shape[0] // size, img.shape[1] // size
        cells = [(r, c) for r in range(rows) for c in range(cols)]
        for k in rng.permutation(len(cells))[:per_source]:
            r, c = cells[k]
            out.append((f"{name}_{size}_{r}{c}", img[r * size : (r + 1) * size, c * size : (c + 1) * size]))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "src/o2m/assets")
    args = ap.parse_args()
    for split, (count, size, per_source) in SPLITS.items():
        candidates = tiles(size, per_source)
        order = make_rng(0, "split", split).permutation(len(candidates))
        gt = args.out / split / "gt"
        gt.mkdir(parents=True, exist_ok=True)
        for old in gt.glob("*.png"):
            old.unlink()
        for k in order[:count]:
            name, px = candidates[k]
            save_image(ImageBuffer(np.ascontiguousarray(px)), gt / f"{name}.png")


if __name__ == "__main__":
    main()
