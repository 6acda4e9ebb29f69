"""aortaseg: Dense tensor kernels.

Forward and backward primitives for the dilated network. Tensors are
C-contiguous ``numpy.ndarray`` objects laid out (batch, channel, row, col);
``float32`` is the working precision and ``float64`` is used for gradient
checks. All functions are pure: nothing here mutates its arguments.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from .errors import InvalidArgumentError

Tensor = npt.NDArray[np.floating]

BN_EPSILON: float = 1e-5
BN_MOMENTUM: float = 0.9


@dataclass
class ConvParams:
    """Parameters of one dilated convolution.

    Attributes
    ----------
    weights : Tensor
        Filters of shape (out_channels, in_channels, kh, kw).
    bias : Tensor
        Bias of shape (out_channels,).
    dilation : int
        Isotropic dilation factor.
    """

    weights: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self) -> None:
        if self.weights.ndim != 4:
            raise InvalidArgumentError(
                f"weights must be 4-d, got shape {self.weights.shape}"
            )
        out_channels, _, kh, kw = self.weights.shape
        if kh != kw:
            raise InvalidArgumentError(f"kernel must be square, got {kh}x{kw}")
        if self.bias.shape != (out_channels,):
            raise InvalidArgumentError(
                f"bias shape {self.bias.shape} does not match {out_channels} filters"
            )
        if self.dilation < 1:
            raise InvalidArgumentError(f"dilation must be >= 1, got {self.dilation}")
        if kh == 1 and self.dilation != 1:
            raise InvalidArgumentError("1x1 kernels must have dilation 1")

    @property
    def span(self) -> int:
        """Number of rows (and columns) removed by a valid convolution."""
        return self.dilation * (self.weights.shape[2] - 1)


@dataclass
class BatchNormParams:
    """Parameters and running statistics of a batch normalisation site.

    Attributes
    ----------
    gamma, beta : Tensor
        Per-channel scale and shift.
    running_mean, running_var : Tensor
        Per-channel statistics used at inference.
    momentum : float
        Weight of the old running value in the moving average.
    epsilon : float
        Variance guard.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum < 1.0:
            raise InvalidArgumentError(f"momentum must be in (0,1): {self.momentum}")
        if self.epsilon <= 0.0:
            raise InvalidArgumentError(f"epsilon must be positive: {self.epsilon}")
        if np.any(self.running_var < 0):
            raise InvalidArgumentError("running_var must be non-negative")

    @classmethod
    def identity(
        cls, channels: int, dtype: npt.DTypeLike = np.float32
    ) -> BatchNormParams:
        """Return gamma=1, beta=0, running mean 0 and running variance 1."""
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def channels(self) -> int:
        """Number of normalised channels."""
        return int(self.gamma.shape[0])


@dataclass
class BatchNormCache:
    """Values kept by :func:`batch_norm` for the backward pass."""

    mode: str
    normalized: Tensor
    inv_std: Tensor
    gamma: Tensor


class BatchNormResult(NamedTuple):
    """Output of :func:`batch_norm`."""

    output: Tensor
    cache: BatchNormCache
    params: BatchNormParams


def _check_4d(name: str, array: np.ndarray) -> None:
    if array.ndim != 4:
        raise InvalidArgumentError(f"{name} must be (N,C,H,W), got shape {array.shape}")


def conv2d_dilated(x: Tensor, params: ConvParams) -> Tensor:
    """Valid dilated 2D convolution.

    ``out[n,o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * in[n,c,y+i*d,x+j*d]``

    Parameters
    ----------
    x : Tensor
        Input of shape (N, Cin, H, W).
    params : ConvParams
        Filters, bias and dilation.

    Returns
    -------
    Tensor
        Output of shape (N, Cout, H - span, W - span).
    """
    _check_4d("x", x)
    batch, in_channels, height, width = x.shape
    out_channels, w_in, kh, kw = params.weights.shape
    if in_channels != w_in:
        raise InvalidArgumentError(
            f"input has {in_channels} channels but weights expect {w_in}"
        )
    span = params.span
    if height <= span or width <= span:
        raise InvalidArgumentError(
            f"input {height}x{width} too small for kernel span {span + 1}"
        )
    out_h, out_w = height - span, width - span
    d = params.dilation
    # accumulate channels-last so every tap is a single tensordot
    acc = np.zeros((batch, out_h, out_w, out_channels), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i * d : i * d + out_h, j * d : j * d + out_w]
            acc += np.tensordot(patch, params.weights[:, :, i, j], axes=([1], [1]))
    acc += params.bias
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def conv2d_dilated_grad(
    x: Tensor,
    params: ConvParams,
    grad_out: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """Backward pass of :func:`conv2d_dilated`.

    Parameters
    ----------
    x : Tensor
        The forward input (N, Cin, H, W).
    params : ConvParams
        The forward parameters.
    grad_out : Tensor
        Gradient with respect to the forward output.

    Returns
    -------
    tuple[Tensor, Tensor, Tensor]
        Gradients with respect to input, weights and bias.
    """
    _check_4d("x", x)
    _check_4d("grad_out", grad_out)
    batch, in_channels, height, width = x.shape
    out_channels, w_in, kh, kw = params.weights.shape
    span = params.span
    expected = (batch, out_channels, height - span, width - span)
    if in_channels != w_in or grad_out.shape != expected:
        raise InvalidArgumentError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected}"
        )
    out_h, out_w = expected[2], expected[3]
    d = params.dilation
    grad_nhwc = grad_out.transpose(0, 2, 3, 1)
    grad_input = np.zeros_like(x)
    grad_weights = np.zeros_like(params.weights)
    for i in range(kh):
        for j in range(kw):
            rows = slice(i * d, i * d + out_h)
            cols = slice(j * d, j * d + out_w)
            patch = x[:, :, rows, cols]
            grad_weights[:, :, i, j] = np.tensordot(
                grad_nhwc, patch, axes=([0, 1, 2], [0, 2, 3])
            )
            back = np.tensordot(grad_nhwc, params.weights[:, :, i, j], axes=([3], [0]))
            grad_input[:, :, rows, cols] += back.transpose(0, 3, 1, 2)
    grad_bias = grad_out.sum(axis=(0, 2, 3)).astype(params.bias.dtype)
    return grad_input, grad_weights, grad_bias


def batch_norm(
    x: Tensor,
    params: BatchNormParams,
    mode: str = "infer",
) -> BatchNormResult:
    """Per-channel batch normalisation.

    In ``"train"`` mode the batch mean and (biased) variance over (N, H, W)
    are used and the running statistics move towards them; in ``"infer"``
    mode the running statistics are used and returned unchanged.

    Parameters
    ----------
    x : Tensor
        Input of shape (N, C, H, W).
    params : BatchNormParams
        Affine parameters and running statistics.
    mode : str, default "infer"
        ``"train"`` or ``"infer"``.

    Returns
    -------
    BatchNormResult
        Output, backward cache and the (possibly updated) parameters.
    """
    _check_4d("x", x)
    if x.shape[1] != params.channels:
        raise InvalidArgumentError(
            f"input has {x.shape[1]} channels, batch norm has {params.channels}"
        )
    if x.size == 0:
        raise InvalidArgumentError("batch norm needs a non-empty batch")
    if mode not in ("train", "infer"):
        raise InvalidArgumentError(f"unknown batch norm mode: {mode}")
    shape = (1, -1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        momentum = params.momentum
        running_mean = momentum * params.running_mean + (1 - momentum) * mean
        running_var = momentum * params.running_var + (1 - momentum) * var
        params = replace(
            params,
            running_mean=running_mean.astype(params.running_mean.dtype),
            running_var=running_var.astype(params.running_var.dtype),
        )
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype)
    normalized = (x - mean.reshape(shape).astype(x.dtype)) * inv_std.reshape(shape)
    output = normalized * params.gamma.reshape(shape) + params.beta.reshape(shape)
    cache = BatchNormCache(mode, normalized, inv_std, params.gamma)
    return BatchNormResult(output.astype(x.dtype), cache, params)


def batch_norm_grad(
    cache: BatchNormCache, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Backward pass of train-mode :func:`batch_norm`.

    Returns
    -------
    tuple[Tensor, Tensor, Tensor]
        Gradients with respect to input, gamma and beta.
    """
    if cache.mode != "train":
        raise InvalidArgumentError("batch_norm_grad needs a train-mode cache")
    if grad_out.shape != cache.normalized.shape:
        raise InvalidArgumentError(
            f"grad_out shape {grad_out.shape} != {cache.normalized.shape}"
        )
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    count = grad_out.size // grad_out.shape[1]
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * cache.normalized).sum(axis=axes)
    grad_norm = grad_out * cache.gamma.reshape(shape)
    grad_input = (
        cache.inv_std.reshape(shape)
        / count
        * (
            count * grad_norm
            - grad_norm.sum(axis=axes).reshape(shape)
            - cache.normalized
            * (grad_norm * cache.normalized).sum(axis=axes).reshape(shape)
        )
    )
    return grad_input.astype(grad_out.dtype), grad_gamma, grad_beta


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``."""
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_grad(x: Tensor, grad_out: Tensor) -> Tensor:
    """Backward of :func:`relu` given the cached forward input."""
    if x.shape != grad_out.shape:
        raise InvalidArgumentError(f"shape mismatch {x.shape} vs {grad_out.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax_channels(x: Tensor) -> Tensor:
    """Numerically stable softmax over the channel axis of (N, C, H, W)."""
    _check_4d("x", x)
    if x.shape[1] < 2:
        raise InvalidArgumentError("softmax needs at least two channels")
    shifted = x - x.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def softmax_channels_grad(probabilities: Tensor, grad_out: Tensor) -> Tensor:
    """Backward of :func:`softmax_channels` given its output."""
    if probabilities.shape != grad_out.shape:
        raise InvalidArgumentError(
            f"shape mismatch {probabilities.shape} vs {grad_out.shape}"
        )
    inner = (grad_out * probabilities).sum(axis=1, keepdims=True)
    return probabilities * (grad_out - inner)


def dropout_mask(
    shape: tuple[int, ...],
    p: float,
    rng: np.random.Generator,
    dtype: npt.DTypeLike = np.float32,
) -> Tensor:
    """Inverted dropout mask: 0 with probability ``p``, else ``1/(1-p)``.

    Parameters
    ----------
    shape : tuple[int, ...]
        Mask shape.
    p : float
        Drop probability in [0, 1).
    rng : np.random.Generator
        Source of randomness.
    dtype : DTypeLike, default float32
        Mask dtype.

    Returns
    -------
    Tensor
        The mask.
    """
    if not 0.0 <= p < 1.0:
        raise InvalidArgumentError(f"dropout probability must be in [0,1): {p}")
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def pad2d(x: Tensor, margin: int, value: float = 0.0) -> Tensor:
    """Constant border of width ``margin`` around both spatial axes."""
    _check_4d("x", x)
    if margin < 0:
        raise InvalidArgumentError(f"margin must be >= 0, got {margin}")
    if margin == 0:
        return x.copy()
    width = ((0, 0), (0, 0), (margin, margin), (margin, margin))
    return np.pad(x, width, mode="constant", constant_values=value)


def crop2d(x: Tensor, margin: int) -> Tensor:
    """Remove a border of width ``margin`` from both spatial axes."""
    _check_4d("x", x)
    if margin < 0 or 2 * margin >= min(x.shape[2:]):
        raise InvalidArgumentError(f"cannot crop {margin} from {x.shape}")
    if margin == 0:
        return x.copy()
    return x[:, :, margin:-margin, margin:-margin].copy()


def numerical_gradient(
    func: Callable[[], float], array: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of ``func`` with respect to ``array``.

    ``array`` is perturbed in place and restored; ``func`` must read it.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        plus = func()
        array[index] = original - eps
        minus = func()
        array[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise relative error, floored at 1e-3 of the gradient scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-3 * scale)
    return float((np.abs(analytic - numeric) / denom).max())
