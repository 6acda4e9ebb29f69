"""Tests for the tensor kernels."""

import numpy as np
import pytest

from aortaseg import tensor_core as tc
from aortaseg.errors import InvalidArgumentError
from aortaseg.trainer import soft_dice_loss

# pylint: disable=redefined-outer-name


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(1234)


def conv_oracle(x, weights, bias, dilation):
    """Direct loop evaluation of a valid dilated convolution."""
    batch, in_channels, height, width = x.shape
    out_channels, _, k, _ = weights.shape
    span = dilation * (k - 1)
    out = np.zeros((batch, out_channels, height - span, width - span))
    for n in range(batch):
        for o in range(out_channels):
            for y in range(height - span):
                for xx in range(width - span):
                    total = bias[o]
                    for c in range(in_channels):
                        for i in range(k):
                            for j in range(k):
                                total += (
                                    weights[o, c, i, j]
                                    * x[n, c, y + i * dilation, xx + j * dilation]
                                )
                    out[n, o, y, xx] = total
    return out


def conv_params(rng, out_channels, in_channels, k, dilation, dtype=np.float64):
    """Random convolution parameters."""
    weights = rng.normal(size=(out_channels, in_channels, k, k)).astype(dtype)
    bias = rng.normal(size=out_channels).astype(dtype)
    return tc.ConvParams(weights, bias, dilation)


def test_conv_identity_kernel(rng):
    """A centred one-hot kernel copies the interior of the input."""
    x = rng.normal(size=(1, 1, 7, 7))
    weights = np.zeros((1, 1, 3, 3))
    weights[0, 0, 1, 1] = 1.0
    out = tc.conv2d_dilated(x, tc.ConvParams(weights, np.zeros(1), 2))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out[0, 0], x[0, 0, 2:5, 2:5])


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_conv_matches_loop_oracle(rng, dilation):
    """The vectorised convolution agrees with the loop oracle."""
    x = rng.normal(size=(2, 3, 2 * dilation + 5, 2 * dilation + 6))
    params = conv_params(rng, 4, 3, 3, dilation)
    expected = conv_oracle(x, params.weights, params.bias, dilation)
    np.testing.assert_allclose(tc.conv2d_dilated(x, params), expected, atol=1e-6)


def test_conv_output_shape_and_errors(rng):
    """Valid convolutions shrink by the span; undersized inputs are rejected."""
    params = conv_params(rng, 2, 1, 3, 32)
    out = tc.conv2d_dilated(np.zeros((1, 1, 70, 66)), params)
    assert out.shape == (1, 2, 6, 2)
    with pytest.raises(InvalidArgumentError):
        tc.conv2d_dilated(np.zeros((1, 1, 64, 64)), params)
    with pytest.raises(InvalidArgumentError):
        tc.conv2d_dilated(np.zeros((1, 2, 70, 70)), params)


def test_conv_1x1_rejects_dilation():
    """1x1 kernels cannot be dilated."""
    with pytest.raises(InvalidArgumentError):
        tc.ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1), 2)


@pytest.mark.parametrize("dilation", [1, 2, 4, 8, 16, 32])
def test_conv_gradient(rng, dilation):
    """Convolution gradients match central differences in 64-bit."""
    size = 2 * dilation + 3
    x = rng.normal(size=(1, 2, size, size))
    params = conv_params(rng, 2, 2, 3, dilation)
    target = rng.normal(size=tc.conv2d_dilated(x, params).shape)

    def loss():
        return float((tc.conv2d_dilated(x, params) * target).sum())

    grad_x, grad_w, grad_b = tc.conv2d_dilated_grad(x, params, target)
    numeric_w = tc.numerical_gradient(loss, params.weights)
    numeric_b = tc.numerical_gradient(loss, params.bias)
    assert tc.max_relative_error(grad_w, numeric_w) <= 1e-5
    assert tc.max_relative_error(grad_b, numeric_b) <= 1e-5
    assert tc.max_relative_error(grad_x, tc.numerical_gradient(loss, x)) <= 1e-5


def test_conv_gradient_float32(rng):
    """32-bit analytic gradients stay within 1e-3 of 64-bit differences."""
    x = rng.normal(size=(2, 2, 9, 9))
    params = conv_params(rng, 3, 2, 3, 2)
    target = rng.normal(size=(2, 3, 5, 5))

    def loss():
        return float((tc.conv2d_dilated(x, params) * target).sum())

    numeric = tc.numerical_gradient(loss, params.weights)
    params32 = tc.ConvParams(
        params.weights.astype(np.float32), params.bias.astype(np.float32), 2
    )
    _, grad_w, _ = tc.conv2d_dilated_grad(
        x.astype(np.float32), params32, target.astype(np.float32)
    )
    assert grad_w.dtype == np.float32
    assert tc.max_relative_error(grad_w, numeric) <= 1e-3


def test_batch_norm_train_statistics(rng):
    """Train mode normalises each channel and moves the running statistics."""
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
    params = tc.BatchNormParams.identity(3, np.float64)
    result = tc.batch_norm(x, params, "train")
    np.testing.assert_allclose(result.output.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(result.output.var(axis=(0, 2, 3)), 1.0, rtol=1e-4)
    expected_mean = 0.1 * x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(result.params.running_mean, expected_mean)
    np.testing.assert_array_equal(params.running_mean, np.zeros(3))


def test_batch_norm_infer_uses_running_statistics(rng):
    """Infer mode applies the stored statistics and leaves them unchanged."""
    x = rng.normal(size=(2, 2, 3, 3))
    params = tc.BatchNormParams(
        gamma=np.array([2.0, 1.0]),
        beta=np.array([0.5, -1.0]),
        running_mean=np.array([1.0, 0.0]),
        running_var=np.array([4.0, 1.0]),
    )
    result = tc.batch_norm(x, params, "infer")
    expected = (x[:, 0] - 1.0) / np.sqrt(4.0 + tc.BN_EPSILON) * 2.0 + 0.5
    np.testing.assert_allclose(result.output[:, 0], expected)
    assert result.params is params
    with pytest.raises(InvalidArgumentError):
        tc.batch_norm_grad(result.cache, np.ones_like(x))


def test_batch_norm_gradient(rng):
    """Batch norm gradients match central differences."""
    x = rng.normal(size=(3, 2, 4, 4))
    params = tc.BatchNormParams(
        rng.normal(size=2), rng.normal(size=2), np.zeros(2), np.ones(2)
    )
    target = rng.normal(size=x.shape)

    def loss():
        return float((tc.batch_norm(x, params, "train").output * target).sum())

    result = tc.batch_norm(x, params, "train")
    grad_x, grad_gamma, grad_beta = tc.batch_norm_grad(result.cache, target)
    assert tc.max_relative_error(grad_x, tc.numerical_gradient(loss, x)) <= 1e-5
    numeric_gamma = tc.numerical_gradient(loss, params.gamma)
    numeric_beta = tc.numerical_gradient(loss, params.beta)
    assert tc.max_relative_error(grad_gamma, numeric_gamma) <= 1e-5
    assert tc.max_relative_error(grad_beta, numeric_beta) <= 1e-5


def test_relu_gradient(rng):
    """ReLU gradients match central differences away from zero."""
    x = rng.normal(size=(2, 3, 4, 4))
    x[np.abs(x) < 0.1] = 0.5
    target = rng.normal(size=x.shape)

    def loss():
        return float((tc.relu(x) * target).sum())

    analytic = tc.relu_grad(x, target)
    assert tc.max_relative_error(analytic, tc.numerical_gradient(loss, x)) <= 1e-5


def test_softmax_sums_to_one(rng):
    """Softmax output sums to one per position even for large logits."""
    x = rng.normal(scale=50.0, size=(2, 4, 3, 3))
    probabilities = tc.softmax_channels(x)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(probabilities >= 0)
    with pytest.raises(InvalidArgumentError):
        tc.softmax_channels(np.zeros((1, 1, 2, 2)))


def test_softmax_dice_composite_gradient(rng):
    """Softmax followed by the soft Dice loss passes a gradient check."""
    logits = rng.normal(size=(2, 3, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4))

    def loss():
        return soft_dice_loss(tc.softmax_channels(logits), labels)[0]

    probabilities = tc.softmax_channels(logits)
    _, grad_p = soft_dice_loss(probabilities, labels)
    analytic = tc.softmax_channels_grad(probabilities, grad_p)
    assert tc.max_relative_error(analytic, tc.numerical_gradient(loss, logits)) <= 1e-5


def test_dropout_mask(rng):
    """Inverted dropout keeps the expected value and rejects p outside [0, 1)."""
    mask = tc.dropout_mask((200, 200), 0.5, rng)
    assert set(np.unique(mask)) <= {0.0, 2.0}
    assert abs(mask.mean() - 1.0) < 0.05
    np.testing.assert_array_equal(tc.dropout_mask((3, 3), 0.0, rng), np.ones((3, 3)))
    with pytest.raises(InvalidArgumentError):
        tc.dropout_mask((2, 2), 1.0, rng)


def test_pad_crop_identity(rng):
    """Cropping a padded tensor restores it exactly."""
    x = rng.normal(size=(2, 1, 5, 6)).astype(np.float32)
    padded = tc.pad2d(x, 65, 0.0)
    assert padded.shape == (2, 1, 135, 136)
    assert padded[0, 0, 0, 0] == 0.0
    np.testing.assert_array_equal(tc.crop2d(padded, 65), x)
    with pytest.raises(InvalidArgumentError):
        tc.crop2d(x, 3)
