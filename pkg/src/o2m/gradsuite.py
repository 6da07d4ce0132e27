"""Finite-difference checks for every layer and loss, in 64-bit, on small shapes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core.gradcheck import finite_difference_check
from .core.rng import make_rng
from .core.tensor import Tensor, leaky_relu
from .data import ImageBuffer
from .jpeg import idct2_blocks, jpeg_degrade, quant_table
from .losses import LossWeights, combined_loss, discriminator_loss, jpeg_loss, naturalness_loss, perceptual_loss
from .networks import DiscriminatorNet, FeatureNet
from .nn import BatchNorm2d, Conv2d, Deconv2d, ResidualUnit, batch_norm, conv2d, deconv2d, deconv2d_shift_average

TOLERANCE = 1e-4
SAMPLED = 12  # entries checked per large parameter tensor


@dataclass
class GradResult:
    name: str
    max_error: float

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def _weighted(out: Tensor, rng) -> Tensor:
    # a random projection makes every output entry matter
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def _cases(seed: int) -> list[tuple[str, Callable[[], float]]]:
    rng = make_rng(seed, "gradsuite")
    f64 = np.float64

    def x(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    cases = []

    def conv_case(kernel, stride):
        conv = Conv2d(3, 4, kernel, stride, rng=rng, dtype=f64)
        inp = x((2, 3, 7, 6))
        return lambda: finite_difference_check(lambda: _weighted(conv2d(inp, conv), make_rng(1)), [inp, conv.weight, conv.bias])

    cases.append(("conv 3x3/1", conv_case(3, 1)))
    cases.append(("conv 4x4/2", conv_case(4, 2)))

    def deconv_case(shift_average):
        up = Deconv2d(3, 2, 4, 2, shift_average=shift_average, rng=rng, dtype=f64)
        inp = x((2, 3, 4, 5))
        fn = deconv2d_shift_average if shift_average else deconv2d
        return lambda: finite_difference_check(lambda: _weighted(fn(inp, up), make_rng(2)), [inp, up.weight, up.bias])

    cases.append(("deconv 4x4/2 plain", deconv_case(False)))
    cases.append(("deconv 4x4/2 shift-and-average", deconv_case(True)))

    def bn_case(training):
        bn = BatchNorm2d(3, dtype=f64)
        bn.gamma.data[:] = rng.uniform(0.5, 2.0, 3)
        bn.beta.data[:] = rng.standard_normal(3)
        bn.running_mean[:] = rng.standard_normal(3)
        bn.running_var[:] = rng.uniform(0.5, 2.0, 3)
        bn.train(training)
        inp = x((3, 3, 4, 5), 2.0)

        def run():
            with_stats = bn.track_running_stats
            bn.track_running_stats = False  # repeated evaluation must not drift the buffers
            try:
                return finite_difference_check(lambda: _weighted(batch_norm(inp, bn), make_rng(3)), [inp, bn.gamma, bn.beta])
            finally:
                bn.track_running_stats = with_stats

        return run

    cases.append(("batch norm (train)", bn_case(True)))
    cases.append(("batch norm (eval)", bn_case(False)))

    def lrelu_case():
        raw = rng.standard_normal((2, 3, 5, 5))
        raw[np.abs(raw) < 0.05] = 0.5  # keep every entry off the kink
        inp = Tensor(raw, requires_grad=True)
        return lambda: finite_difference_check(lambda: _weighted(leaky_relu(inp, 0.2), make_rng(4)), [inp])

    cases.append(("leaky relu", lrelu_case()))

    def residual_case():
        unit = ResidualUnit(4, rng=rng, dtype=f64)
        inp = x((2, 4, 6, 6))
        # conv1.bias feeds bn2, which cancels it; its zero gradient would only compare roundoff
        params = [inp] + [p for p in unit.parameters() if p is not unit.conv1.bias]
        return lambda: finite_difference_check(lambda: _weighted(unit(inp), make_rng(5)), params, max_entries=SAMPLED)

    cases.append(("residual unit", residual_case()))

    fe = FeatureNet(1, seed=seed).astype(f64)
    # same layer structure as the real D, narrower so float64 differencing stays quick
    disc = DiscriminatorNet(1, input_size=16, seed=seed, filters=(8, 16, 16, 32)).astype(f64)
    xhat = Tensor(rng.uniform(-1, 1, (2, 1, 16, 16)), requires_grad=True)
    real = Tensor(rng.uniform(-1, 1, (2, 1, 16, 16)))
    imgs = [ImageBuffer(make_rng(seed, "gradsuite-img", k).integers(0, 256, (16, 16, 1)).astype(np.uint8)) for k in range(2)]
    Q = quant_table(10)
    y_dct = np.stack([jpeg_degrade(img, 10)[1].coeffs for img in imgs])
    pixels = Tensor(rng.uniform(0, 255, (2, 1, 16, 16)), requires_grad=True)
    # The combined loss is checked near the decoded images, as in training. From
    # a random start its JPEG term is so large that float64 cancellation swamps
    # the small perceptual gradients; quality 50 keeps that term active anyway.
    Q50 = quant_table(50)
    y50 = np.stack([jpeg_degrade(img, 50)[1].coeffs for img in imgs])
    near = Tensor((idct2_blocks(y50) + 128.0) / 127.5 - 1.0 + rng.normal(0.0, 0.03, y_dct.shape[:2] + (16, 16)), requires_grad=True)

    cases.append(
        ("perceptual loss", lambda: finite_difference_check(lambda: perceptual_loss(xhat, real, fe), [xhat] + fe.parameters()[:2], max_entries=SAMPLED))
    )
    cases.append(
        ("naturalness loss", lambda: finite_difference_check(lambda: naturalness_loss(xhat, disc), [xhat] + disc.parameters()[-2:], max_entries=SAMPLED))
    )
    cases.append(
        ("discriminator loss", lambda: finite_difference_check(lambda: discriminator_loss(real, xhat, disc), disc.parameters()[-4:], max_entries=SAMPLED))
    )
    # the truncated quadratic is exact under a wider step, which keeps roundoff low at pixel scale
    cases.append(("jpeg loss", lambda: finite_difference_check(lambda: jpeg_loss(pixels, y_dct, Q), [pixels], eps=1e-3)))
    cases.append(
        (
            "combined loss",
            lambda: finite_difference_check(
                lambda: combined_loss(near, real, y50, Q50, [True, False], LossWeights(), fe, disc)[0],
                [near],
                eps=1e-6,
                max_entries=4 * SAMPLED,
            ),
        )
    )
    return cases


def run_gradient_suite(seed: int = 0, progress: Callable[[GradResult], None] | None = None) -> list[GradResult]:
    results = []
    for name, check in _cases(seed):
        res = GradResult(name, float(check()))
        results.append(res)
        if progress is not None:
            progress(res)
    return results
