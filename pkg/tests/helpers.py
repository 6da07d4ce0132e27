"""Shared builders for the test modules."""

import numpy as np

from o2m.data import ImageBuffer


def random_image(rng, h, w, channels=1):
    shape = (h, w) if channels == 1 else (h, w, channels)
    return ImageBuffer(rng.integers(0, 256, size=shape, dtype=np.uint8), "L" if channels == 1 else "RGB")
