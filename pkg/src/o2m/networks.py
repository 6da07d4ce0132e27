"""
Generator, discriminator and the frozen feature network.

All three take images scaled to [-1, 1] in NCHW layout.

ProposalNet (generator)::

    y [n,C,h,w] --conv4x4/2 (64)--> 5 residual units --+
                                                       concat (128) -> conv1x1 (64)
    z [n,1,h,w] --conv4x4/2 (64)--> 5 residual units --+
        -> 10 residual units -> BN -> ReLU -> deconv4x4/2 with shift-and-average (C)

DiscriminatorNet: four units of (stride-1 conv, stride-2 conv), 4x4 filters,
64/128/256/512 channels, BN + LeakyReLU(0.2) after every conv but the last,
then logistic regression over the flattened final map.

FeatureNet: four stride-2 4x4 conv + ReLU stages (16, 32, 64, 128 channels);
the last ReLU map is the perceptual feature. A global-average-pool linear head
is only used while the network is being trained as a classifier.
"""

from __future__ import annotations

import numpy as np

from .core.module import Module
from .core.rng import make_rng
from .core.tensor import Tensor, concat, flatten, leaky_relu, matmul, mean, relu, sigmoid
from .errors import ChannelMismatchError, ShapeError
from .nn import BatchNorm2d, Conv2d, Deconv2d, ResidualUnit, batch_norm, conv2d

WIDTH = 64
LEAK = 0.2


class ProposalNet(Module):
    def __init__(
        self,
        channels: int = 1,
        seed: int = 0,
        width: int = WIDTH,
        branch_units: int = 5,
        aggregate_units: int = 10,
        shift_average: bool = True,
        dtype=np.float32,
    ):
        super().__init__()
        if channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {channels}")
        rng = make_rng(seed, "proposal-init")
        self.channels = channels
        self.y_down = Conv2d(channels, width, 4, 2, rng=rng, dtype=dtype)
        self.y_branch = [ResidualUnit(width, rng=rng, dtype=dtype) for _ in range(branch_units)]
        self.z_down = Conv2d(1, width, 4, 2, rng=rng, dtype=dtype)
        self.z_branch = [ResidualUnit(width, rng=rng, dtype=dtype) for _ in range(branch_units)]
        self.project = Conv2d(2 * width, width, 1, 1, rng=rng, dtype=dtype)
        self.aggregate = [ResidualUnit(width, rng=rng, dtype=dtype) for _ in range(aggregate_units)]
        self.out_bn = BatchNorm2d(width, dtype=dtype)
        self.up = Deconv2d(width, channels, 4, 2, shift_average=shift_average, rng=rng, dtype=dtype)

    def forward(self, y: Tensor, z: Tensor) -> Tensor:
        if y.ndim != 4 or y.shape[1] != self.channels:
            raise ChannelMismatchError(f"network expects {self.channels}-channel input, got {y.shape}")
        if y.shape[2] % 2 or y.shape[3] % 2:
            raise ShapeError(f"spatial dimensions must be even, got {y.shape[2:]}; pad first")
        if z.shape[0] != y.shape[0] or z.shape[2:] != y.shape[2:] or z.shape[1] != 1:
            raise ShapeError(f"noise map {z.shape} does not match input {y.shape}")
        a = self.y_down(y)
        for unit in self.y_branch:
            a = unit(a)
        b = self.z_down(z)
        for unit in self.z_branch:
            b = unit(b)
        h = self.project(concat([a, b], axis=1))
        for unit in self.aggregate:
            h = unit(h)
        h = relu(self.out_bn(h))
        return self.up(h)


def proposal_parameter_count(channels: int, width: int = WIDTH, units: int = 20) -> int:
    """Closed-form trainable parameter count of :class:`ProposalNet`."""
    conv = lambda cin, cout, k: cout * cin * k * k + cout  # noqa: E731
    unit = 2 * conv(width, width, 3) + 2 * 2 * width
    return (
        conv(channels, width, 4)
        + conv(1, width, 4)
        + units * unit
        + conv(2 * width, width, 1)
        + 2 * width
        + conv(width, channels, 4)
    )


class DiscriminatorNet(Module):
    FILTERS = (64, 128, 256, 512)

    def __init__(self, channels: int = 1, input_size: int = 64, seed: int = 0, filters=FILTERS, dtype=np.float32):
        super().__init__()
        if input_size < 16 or input_size % 16:
            raise ShapeError(f"discriminator input size must be a multiple of 16 and >= 16, got {input_size}")
        rng = make_rng(seed, "discriminator-init")
        self.channels = channels
        self.input_size = input_size
        convs, norms = [], []
        cin = channels
        for f in filters:
            convs.append(Conv2d(cin, f, 4, 1, rng=rng, dtype=dtype))
            norms.append(BatchNorm2d(f, dtype=dtype))
            convs.append(Conv2d(f, f, 4, 2, rng=rng, dtype=dtype))
            norms.append(BatchNorm2d(f, dtype=dtype))
            cin = f
        norms.pop()  # the final conv has neither BN nor activation
        self.convs = convs
        self.norms = norms
        side = input_size // 2 ** len(filters)
        n_features = cin * side * side
        self.logit_weight = Tensor(
            rng.uniform(-np.sqrt(6.0 / n_features), np.sqrt(6.0 / n_features), (n_features, 1)).astype(dtype),
            requires_grad=True,
        )
        self.logit_bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def features(self, x: Tensor, keep: bool = False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ChannelMismatchError(f"discriminator expects {self.channels} channels, got {x.shape}")
        if x.shape[2] != self.input_size or x.shape[3] != self.input_size:
            raise ShapeError(
                f"discriminator was built for {self.input_size}x{self.input_size} input, got {x.shape[2:]}"
            )
        stages = []
        h = x
        for i, conv in enumerate(self.convs):
            h = conv2d(h, conv)
            if i < len(self.norms):
                h = leaky_relu(batch_norm(h, self.norms[i]), LEAK)
            if i % 2 == 1:
                stages.append(h)
        return (h, stages) if keep else h

    def logits(self, x: Tensor) -> Tensor:
        h = self.features(x)
        return matmul(flatten(h), self.logit_weight) + self.logit_bias

    def forward(self, x: Tensor) -> Tensor:
        """Probability that each image is natural, shape [n]."""
        return sigmoid(self.logits(x)).reshape(-1)


class FeatureNet(Module):
    WIDTHS = (16, 32, 64, 128)

    def __init__(self, channels: int = 1, num_classes: int = 4, seed: int = 0, widths=WIDTHS, dtype=np.float32):
        super().__init__()
        rng = make_rng(seed, "feature-init")
        self.channels = channels
        stages = []
        cin = channels
        for w in widths:
            stages.append(Conv2d(cin, w, 4, 2, rng=rng, dtype=dtype))
            cin = w
        self.stages = stages
        self.head_weight = Tensor(
            rng.uniform(-np.sqrt(6.0 / cin), np.sqrt(6.0 / cin), (cin, num_classes)).astype(dtype),
            requires_grad=True,
        )
        self.head_bias = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.head_weight.shape[1]

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ChannelMismatchError(f"feature network expects {self.channels} channels, got {x.shape}")
        h = x
        for conv in self.stages:
            h = relu(conv2d(h, conv))
        return h

    def forward(self, x: Tensor) -> Tensor:
        """Class logits [n, classes]."""
        pooled = mean(self.features(x), axis=(2, 3))
        return matmul(pooled, self.head_weight) + self.head_bias


def sample_z(shape: tuple[int, int], seed: int, batch: int = 1, dtype=np.float32, draw: int = 0) -> Tensor:
    """Single-channel N(0, 1) noise map [batch, 1, h, w].

    Deterministic in (``seed``, ``draw``); distinct draws are independent streams.
    """
    h, w = shape
    rng = make_rng(seed, "z", draw)
    return Tensor(rng.standard_normal((batch, 1, h, w)).astype(dtype))


def to_model_range(pixels: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1]."""
    return np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def to_pixel_range(values: np.ndarray) -> np.ndarray:
    return (np.asarray(values) + 1.0) * 127.5
