import numpy as np
import pytest

from o2m.core.gradcheck import finite_difference_check
from o2m.core.tensor import Tensor, no_grad
from o2m.errors import ChannelMismatchError, ShapeError
from o2m.networks import (
    DiscriminatorNet,
    FeatureNet,
    ProposalNet,
    proposal_parameter_count,
    sample_z,
    to_model_range,
    to_pixel_range,
)


def small_proposal(channels=1, seed=0, dtype=np.float32):
    return ProposalNet(channels, seed=seed, width=8, branch_units=1, aggregate_units=1, dtype=dtype)


class TestSampleZ:
    def test_deterministic(self):
        np.testing.assert_array_equal(sample_z((8, 6), 3).data, sample_z((8, 6), 3).data)

    def test_statistics(self):
        z = sample_z((100, 1000), 0, dtype=np.float64).data
        assert abs(z.mean()) < 0.02 and 0.98 <= z.std() <= 1.02

    def test_seeds_and_draws_differ(self):
        a = sample_z((8, 8), 1).data
        assert np.linalg.norm(a - sample_z((8, 8), 2).data) > 0
        assert np.linalg.norm(a - sample_z((8, 8), 1, draw=1).data) > 0

    def test_shape(self):
        assert sample_z((6, 4), 0, batch=3).shape == (3, 1, 6, 4)


class TestProposal:
    @pytest.mark.parametrize("channels,h,w", [(1, 64, 64), (3, 128, 96)])
    def test_output_shape(self, channels, h, w):
        net = ProposalNet(channels).eval()
        with no_grad():
            out = net(Tensor(np.zeros((1, channels, h, w), np.float32)), sample_z((h, w), 0))
        assert out.shape == (1, channels, h, w)

    @pytest.mark.parametrize("channels", [1, 3])
    def test_parameter_count(self, channels):
        assert ProposalNet(channels).num_parameters() == proposal_parameter_count(channels) == 2049 * channels + 1_491_776

    def test_different_z_different_output(self, rng):
        net = ProposalNet(1, seed=2).eval()
        y = Tensor(rng.uniform(-1, 1, (1, 1, 32, 32)).astype(np.float32))
        with no_grad():
            a = net(y, sample_z((32, 32), 0)).data
            b = net(y, sample_z((32, 32), 1)).data
        assert np.linalg.norm(a - b) > 0

    def test_zero_weights_give_bias(self, rng):
        net = small_proposal()
        for p in net.parameters():
            p.data[...] = 0.0
        net.up.bias.data[:] = 0.37
        out = net(Tensor(rng.standard_normal((2, 1, 16, 16)).astype(np.float32)), sample_z((16, 16), 0, batch=2))
        np.testing.assert_allclose(out.data, 0.37, rtol=1e-6)

    def test_gradients_reach_inputs(self, rng):
        net = small_proposal(dtype=np.float64)
        y = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
        z = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
        net(y, z).sum().backward()
        assert np.abs(y.grad).sum() > 0 and np.abs(z.grad).sum() > 0
        assert all(p.grad is not None for p in net.parameters())

    def test_rejects_bad_input(self):
        net = small_proposal()
        with pytest.raises(ShapeError):
            net(Tensor(np.zeros((1, 1, 9, 8), np.float32)), sample_z((9, 8), 0))
        with pytest.raises(ChannelMismatchError):
            net(Tensor(np.zeros((1, 3, 8, 8), np.float32)), sample_z((8, 8), 0))

    def test_crop_consistency(self, rng):
        """Away from a border margin, a crop's output equals the crop of the full output (eval mode)."""
        net = ProposalNet(1, seed=5).eval()
        y = rng.uniform(-1, 1, (1, 1, 256, 256)).astype(np.float32)
        z = sample_z((256, 256), 3).data
        with no_grad():
            full = net(Tensor(y), Tensor(z)).data
            top, left, size = 32, 48, 192
            crop = net(Tensor(y[..., top : top + size, left : left + size]), Tensor(z[..., top : top + size, left : left + size])).data
        ref = full[..., top : top + size, left : left + size]

        def gap(margin):
            inner = slice(margin, size - margin)
            return np.abs(crop[..., inner, inner] - ref[..., inner, inner]).max()

        assert gap(64) <= 1e-5  # see docs/architecture.md
        assert gap(16) > 1.0  # the margin is really needed


class TestDiscriminator:
    def test_internal_shapes(self, rng):
        d = DiscriminatorNet(1)
        with no_grad():
            _, stages = d.features(Tensor(rng.standard_normal((1, 1, 64, 64)).astype(np.float32)), keep=True)
        assert [s.shape[1:] for s in stages] == [(64, 32, 32), (128, 16, 16), (256, 8, 8), (512, 4, 4)]

    def test_zero_logistic_weights(self, rng):
        d = DiscriminatorNet(1, input_size=16)
        d.logit_weight.data[...] = 0.0
        out = d(Tensor(rng.standard_normal((3, 1, 16, 16)).astype(np.float32)))
        np.testing.assert_array_equal(out.data, 0.5)

    def test_probability_range(self, rng):
        d = DiscriminatorNet(1, input_size=16, seed=3).eval()
        with no_grad():
            p = d(Tensor(rng.uniform(-4, 4, (1000, 1, 16, 16)).astype(np.float32))).data
        assert p.shape == (1000,) and np.all((p > 0) & (p < 1))

    def test_too_small(self):
        with pytest.raises(ShapeError):
            DiscriminatorNet(1, input_size=8)
        with pytest.raises(ShapeError):
            DiscriminatorNet(1, input_size=16)(Tensor(np.zeros((1, 1, 32, 32), np.float32)))

    def test_input_gradient(self, rng):
        d = DiscriminatorNet(1, input_size=16, seed=1, filters=(4, 4, 4, 4)).astype(np.float64)
        x = Tensor(rng.standard_normal((2, 1, 16, 16)), requires_grad=True)
        for bn in d.norms:
            bn.track_running_stats = False
        assert finite_difference_check(lambda: d(x).sum(), x, max_entries=60) < 1e-4


class TestFeatureNet:
    def test_feature_geometry(self, rng):
        fe = FeatureNet(1)
        assert fe.features(Tensor(rng.standard_normal((2, 1, 64, 64)).astype(np.float32))).shape == (2, 128, 4, 4)
        assert fe(Tensor(np.zeros((2, 1, 64, 64), np.float32))).shape == (2, 4)


def test_range_conversion():
    px = np.array([0.0, 127.5, 255.0])
    np.testing.assert_allclose(to_model_range(px), [-1, 0, 1])
    np.testing.assert_allclose(to_pixel_range(to_model_range(px)), px, atol=1e-4)
