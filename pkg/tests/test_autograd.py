"""Finite-difference gradient checks for every primitive op.

Checks run in the engine's float64 mode with tight tolerances (1e-5);
the float32 path is exercised at the looser 1e-2 tolerance in the
acceptance suite.
"""

import numpy as np
import pytest

from fsnet import ops
from fsnet.tensor import Tensor, backward, tmean, tsum

from _oracles import engine_dtype, fd_gradcheck, rand_tensor


@pytest.fixture(autouse=True)
def _float64_engine():
    with engine_dtype(np.float64):
        yield


def test_conv2d_gradients():
    rng = np.random.default_rng(0)
    x = rand_tensor(rng, (2, 3, 6, 6))
    w = rand_tensor(rng, (4, 3, 3, 3))
    b = rand_tensor(rng, (4,))
    fd_gradcheck(lambda: tsum(ops.conv2d(x, w, b, stride=2, padding=1)), [x, w, b])


def test_conv2d_dilated_gradients():
    rng = np.random.default_rng(1)
    x = rand_tensor(rng, (1, 2, 7, 7))
    w = rand_tensor(rng, (2, 2, 3, 3))
    fd_gradcheck(lambda: tsum(ops.conv2d(x, w, padding=2, dilation=2)), [x, w])


def test_conv2d_direct_path_gradients():
    rng = np.random.default_rng(2)
    x = rand_tensor(rng, (1, 2, 5, 5))
    w = rand_tensor(rng, (3, 2, 3, 3))
    fd_gradcheck(lambda: tsum(ops.conv2d(x, w, padding=1, method="direct")), [x, w])


def test_batch_norm_training_gradients():
    rng = np.random.default_rng(3)
    x = rand_tensor(rng, (2, 3, 4, 4))
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(rng.normal(size=3), requires_grad=True)

    def build():
        # fresh buffers per call so running-stat updates cannot leak between evals
        return tmean(
            ops.batch_norm2d(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
            * rand_const
        )

    rand_const = Tensor(rng.normal(size=(2, 3, 4, 4)))
    fd_gradcheck(build, [x, gamma, beta])


def test_batch_norm_eval_gradients():
    rng = np.random.default_rng(4)
    x = rand_tensor(rng, (2, 2, 3, 3))
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = Tensor(rng.normal(size=2), requires_grad=True)
    rm = rng.normal(size=2)
    rv = rng.uniform(0.5, 2.0, 2)
    fd_gradcheck(
        lambda: tsum(ops.batch_norm2d(x, gamma, beta, rm.copy(), rv.copy(), training=False)),
        [x, gamma, beta],
    )


def test_max_pool_routes_gradient_to_argmax():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    backward(tsum(ops.max_pool2d(x, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 0.0], [0.0, 1.0]])


def test_max_pool_tie_goes_to_first_row_major():
    x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
    backward(tsum(ops.max_pool2d(x, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_gradients():
    rng = np.random.default_rng(5)
    x = rand_tensor(rng, (2, 2, 6, 6))
    weights = Tensor(rng.normal(size=(2, 2, 3, 3)))
    fd_gradcheck(lambda: tsum(ops.max_pool2d(x, 2) * weights), [x])


def test_upsample_nearest_gradients():
    rng = np.random.default_rng(6)
    x = rand_tensor(rng, (1, 2, 3, 3))
    weights = Tensor(rng.normal(size=(1, 2, 6, 6)))
    fd_gradcheck(lambda: tsum(ops.upsample2d(x, 2, "nearest") * weights), [x])


def test_upsample_bilinear_gradients():
    rng = np.random.default_rng(7)
    x = rand_tensor(rng, (1, 2, 3, 4))
    weights = Tensor(rng.normal(size=(1, 2, 6, 8)))
    fd_gradcheck(lambda: tsum(ops.upsample2d(x, 2, "bilinear") * weights), [x])


def test_leaky_relu_gradient_at_negative_input_equals_slope():
    x = Tensor(np.array([-1.0]), requires_grad=True)
    backward(tsum(ops.leaky_relu(x, 0.01)))
    assert x.grad[0] == pytest.approx(0.01)
    x2 = Tensor(np.array([-1.0]), requires_grad=True)
    fd_gradcheck(lambda: tsum(ops.leaky_relu(x2, 0.01)), [x2])


def test_relu_gradient_matches_finite_difference():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=12) + np.sign(rng.normal(size=12)) * 0.1, requires_grad=True)
    fd_gradcheck(lambda: tsum(ops.relu(x) * x), [x])


def test_sigmoid_derivative_at_zero_is_quarter():
    x = Tensor(np.array([0.0]), requires_grad=True)
    backward(tsum(ops.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25)
    x2 = Tensor(np.array([0.0]), requires_grad=True)
    fd_gradcheck(lambda: tsum(ops.sigmoid(x2)), [x2])


def test_dropout_gradients_with_fixed_mask():
    x = rand_tensor(np.random.default_rng(9), (5, 5))
    fd_gradcheck(
        lambda: tsum(ops.dropout(x, 0.4, training=True, rng=np.random.default_rng(42))), [x]
    )


def test_global_avg_pool_gradients():
    rng = np.random.default_rng(10)
    x = rand_tensor(rng, (2, 3, 4, 4))
    weights = Tensor(rng.normal(size=(2, 3)))
    fd_gradcheck(lambda: tsum(ops.global_avg_pool(x) * weights), [x])


def test_linear_gradients():
    rng = np.random.default_rng(11)
    x = rand_tensor(rng, (3, 4))
    w = rand_tensor(rng, (2, 4))
    b = rand_tensor(rng, (2,))
    fd_gradcheck(lambda: tsum(ops.linear(x, w, b) * ops.linear(x, w, b)), [x, w, b])


def test_scale_channels_gradients():
    rng = np.random.default_rng(12)
    x = rand_tensor(rng, (2, 3, 3, 3))
    gate = rand_tensor(rng, (2, 3))
    fd_gradcheck(lambda: tsum(ops.scale_channels(x, gate)), [x, gate])


def test_concat_gradients():
    rng = np.random.default_rng(13)
    a = rand_tensor(rng, (1, 2, 3, 3))
    b = rand_tensor(rng, (1, 3, 3, 3))
    weights = Tensor(rng.normal(size=(1, 5, 3, 3)))
    fd_gradcheck(lambda: tsum(ops.concat_channels([a, b]) * weights), [a, b])


def test_reflect_pad_gradients():
    rng = np.random.default_rng(14)
    x = rand_tensor(rng, (1, 2, 4, 5))
    weights = Tensor(rng.normal(size=(1, 2, 7, 8)))
    fd_gradcheck(lambda: tsum(ops.reflect_pad2d(x, (1, 2, 2, 1)) * weights), [x])


def test_crop_gradients():
    rng = np.random.default_rng(15)
    x = rand_tensor(rng, (1, 2, 5, 5))
    weights = Tensor(rng.normal(size=(1, 2, 3, 3)))
    fd_gradcheck(lambda: tsum(ops.crop2d(x, 1, 1, 3, 3) * weights), [x])


def test_sigmoid_then_mean_gradients():
    rng = np.random.default_rng(16)
    x = rand_tensor(rng, (4, 4))
    fd_gradcheck(lambda: tmean(ops.sigmoid(x)), [x])
