import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from o2m.core.rng import make_rng
from o2m.data import ImageBuffer, bundled_root, list_images, load_image
from o2m.errors import ShapeError
from o2m.jpeg import jpeg_degrade
from o2m.metrics import (
    CSV_HEADER,
    PSNR_CAP,
    MetricReport,
    append_csv,
    blocking_effect_factor,
    evaluate,
    psnr,
    psnr_b,
    ssim,
)
from helpers import random_image


class TestPsnr:
    def test_identical_capped(self, rng):
        img = random_image(rng, 16, 16)
        assert psnr(img, img) == PSNR_CAP == 99.0

    def test_extremes(self):
        assert psnr(np.zeros((4, 4)), np.full((4, 4), 255)) == 0.0

    def test_offset_five(self):
        a = np.full((10, 10), 100)
        assert psnr(a, a + 5) == pytest.approx(10 * math.log10(255**2 / 25))
        assert psnr(a, a + 5) == pytest.approx(34.15, abs=5e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsim:
    def test_identical(self, rng):
        img = random_image(rng, 20, 20)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_low(self, natural_image):
        inv = ImageBuffer(255 - natural_image.pixels)
        assert ssim(natural_image, inv) < 0.1

    def test_symmetric(self, rng):
        a, b = random_image(rng, 16, 24), random_image(rng, 16, 24)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)

    def test_single_window_by_hand(self, rng):
        a = rng.uniform(0, 255, (8, 8))
        b = rng.uniform(0, 255, (8, 8))
        c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
        ma, mb = a.mean(), b.mean()
        va, vb = a.var(), b.var()
        cov = ((a - ma) * (b - mb)).mean()
        expect = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
        assert ssim(a, b) == pytest.approx(expect, rel=1e-10)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((7, 9)), np.zeros((7, 9)))


class TestPsnrB:
    def test_worked_example(self):
        ref = np.full((8, 16), 105.0)
        test = np.concatenate([np.full((8, 8), 100.0), np.full((8, 8), 110.0)], axis=1)
        assert blocking_effect_factor(test) == pytest.approx(100.0)
        assert psnr(ref, test) == pytest.approx(34.151, abs=5e-4)
        assert psnr_b(ref, test) == pytest.approx(27.162, abs=5e-4)

    def test_identity(self, rng):
        img = random_image(rng, 16, 16)
        assert psnr_b(img, img) == PSNR_CAP

    def test_smooth_gradient_equals_psnr(self):
        y, x = np.mgrid[0:32, 0:32]
        ref = (3 * x + 2 * y).astype(float)
        test = ref + 4.0
        assert blocking_effect_factor(test) == 0.0
        assert psnr_b(ref, test) == pytest.approx(psnr(ref, test), abs=1e-9)

    def test_jpeg_quality_five_strictly_lower(self, natural_image):
        out, _, _ = jpeg_degrade(natural_image, 5)
        assert psnr_b(natural_image, out) < psnr(natural_image, out)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000))
    def test_never_above_psnr(self, seed):
        r = make_rng(seed, "pair")
        a, b = random_image(r, 16, 24), random_image(r, 16, 24)
        assert psnr_b(a, b) <= psnr(a, b)

    def test_colour_averages_channels(self, rng):
        img = random_image(rng, 16, 16, channels=3)
        per = [blocking_effect_factor(img.pixels[..., c].astype(float)) for c in range(3)]
        assert blocking_effect_factor(img.pixels) == pytest.approx(np.mean(per))


class TestReports:
    def test_evaluate(self, rng):
        a = random_image(rng, 16, 16)
        r = evaluate(a, a, image="x", quality=5, approach="jpeg")
        assert (r.psnr, r.psnrb) == (PSNR_CAP, PSNR_CAP) and r.ssim == pytest.approx(1.0)

    def test_ssim_range_enforced(self):
        with pytest.raises(ValueError):
            MetricReport("x", 5, "a", 30.0, 1.5, 29.0)

    def test_csv_header_once(self, tmp_path, rng):
        a, b = random_image(rng, 16, 16), random_image(rng, 16, 16)
        path = tmp_path / "m.csv"
        append_csv(path, [evaluate(a, b, "one")])
        append_csv(path, [evaluate(a, a, "two")])
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER) == "image,quality,approach,psnr,ssim,psnrb"
        assert len(lines) == 3 and lines[2].startswith("two,,,99.0000")


def test_metric_direction_on_eval_set():
    for path in list_images(bundled_root("eval") / "gt")[:6]:
        gt = load_image(path)
        assert psnr(gt, jpeg_degrade(gt, 20)[0]) > psnr(gt, jpeg_degrade(gt, 5)[0])
