import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from o2m.core import tensor as T
from o2m.core.gradcheck import finite_difference_check, relative_error
from o2m.core.tensor import Function, Tensor, no_grad
from o2m.errors import MissingDerivativeError, NonFiniteError, ShapeError


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((3, 4, 2)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))

    def test_half_square(self):
        x = leaf([3.0, -2.0])
        (0.5 * T.tsum(T.square(x))).backward()
        np.testing.assert_array_equal(x.grad, [3.0, -2.0])

    def test_accumulates_without_reset(self):
        x = leaf([1.0, 2.0])
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            leaf([1.0, 2.0]).backward()

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_non_finite_loss_rejected(self):
        x = leaf([0.0])
        with pytest.raises(NonFiniteError):
            T.tsum(T.log(x)).backward()

    def test_op_without_derivative(self):
        x = leaf([0.4, 1.6])
        with pytest.raises(MissingDerivativeError):
            T.tsum(T.round_half_away(x)).backward()

    def test_shared_subexpression(self):
        x = leaf([2.0])
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = x * 3
        assert not y.requires_grad and y.is_leaf

    def test_detach(self):
        x = leaf([1.0, 2.0])
        y = (x.detach() * x).sum()
        y.backward()
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])


class TestLeakyRelu:
    def test_examples(self):
        out = T.leaky_relu(Tensor(np.array([3.0, -1.0])), 0.2).data
        np.testing.assert_allclose(out, [3.0, -0.2])

    @given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
    def test_zero_slope_is_relu(self, a):
        np.testing.assert_array_equal(T.leaky_relu(Tensor(a), 0.0).data, np.maximum(a, 0.0))

    def test_gradient_off_kink(self, rng):
        values = rng.uniform(0.1, 2.0, 40) * rng.choice([-1, 1], 40)
        x = leaf(values)
        assert finite_difference_check(lambda: T.tsum(T.square(T.leaky_relu(x, 0.2))), x) < 1e-6


# elementwise and structural ops, each wrapped in a weighted sum
OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (T.square(b) + 1.0),
    "pow": lambda a, b: T.power(T.square(a) + 0.5, 1.5),
    "exp": lambda a, b: T.exp(a * 0.3),
    "log": lambda a, b: T.log(T.square(a) + 1.0),
    "sigmoid": lambda a, b: T.sigmoid(a),
    "clip": lambda a, b: T.clip(a, -10.0, 10.0),
    "broadcast": lambda a, b: a * b[0:1],
    "mean": lambda a, b: T.mean(a, axis=1, keepdims=True) * b,
    "reshape_transpose": lambda a, b: T.transpose(T.reshape(a, (4, 3)), (1, 0)).reshape(3, 4) * b,
    "getitem": lambda a, b: a[1:, ::2] * b[:2, :2],
    "concat": lambda a, b: T.concat([a, b], axis=0),
    "pad": lambda a, b: T.pad(a, ((1, 0), (0, 2))),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "log_softmax": lambda a, b: T.log_softmax(a, axis=1),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_composite_gradients(name, rng):
    a = leaf(rng.standard_normal((3, 4)))
    b = leaf(rng.standard_normal((3, 4)))
    op = OPS[name]
    probe = op(a, b)
    w = Tensor(rng.standard_normal(probe.shape))
    assert finite_difference_check(lambda: T.tsum(op(a, b) * w), [a, b]) < 1e-4


class TestGradcheck:
    def test_relative_error_formula(self):
        assert relative_error(np.array([1.0, 0.0]), np.array([1.1, 0.0])) == pytest.approx(0.1 / 1.1)

    def test_rejects_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            finite_difference_check(lambda: x.sum(), x)

    def test_detects_wrong_derivative(self):
        class Bad(Function):
            def forward(self, a):
                return a * a

            def backward(self, g):
                return (g * 3.0,)

        x = leaf([0.7, -1.1])
        assert finite_difference_check(lambda: T.tsum(Bad.apply(x)), x) > 0.1

    def test_restores_inputs(self, rng):
        x = leaf(rng.standard_normal(5))
        before = x.data.copy()
        finite_difference_check(lambda: T.tsum(T.exp(x)), x)
        np.testing.assert_array_equal(x.data, before)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_sum_of_squares_gradient_property(values):
    x = leaf(values)
    T.tsum(T.square(x)).backward()
    np.testing.assert_allclose(x.grad, 2 * np.asarray(values))
