"""aortaseg: Dilated convolutional network.

Eight valid 3x3 convolutions with dilations growing to 32, followed by two 1x1
("fully connected") layers and a channel softmax. The network is purely
convolutional, so any input of at least the receptive field can be analysed;
an input of size H x W yields H - 130 by W - 130 class probabilities.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from . import tensor_core as tc
from .errors import (
    CorruptCheckpointError,
    InvalidArgumentError,
    InvalidCheckpointError,
    InvalidSpecError,
)

logger = logging.getLogger("aortaseg:net")

CONV3X3: str = "conv3x3"
CONV1X1: str = "conv1x1"
KERNEL_SIZE: dict[str, int] = {CONV3X3: 3, CONV1X1: 1}
ACTIVATIONS: tuple[str, ...] = ("none", "relu", "softmax")

CANONICAL_DILATIONS: tuple[int, ...] = (1, 1, 2, 4, 8, 16, 32, 1)
CANONICAL_WIDTH: int = 32
CANONICAL_DROPOUT: float = 0.5
SUPPORTED_CLASSES: tuple[int, ...] = (2, 4)

CHECKPOINT_MAGIC: bytes = b"ADCN"
CHECKPOINT_VERSION: int = 1
# layer flags: bit 0 batch norm, bits 1-2 activation, bits 3-7 dropout in 1/32 steps
DROPOUT_STEPS: int = 32


@dataclass(frozen=True)
class LayerSpec:
    """Description of one convolutional layer.

    Attributes
    ----------
    kind : str
        ``"conv3x3"`` or ``"conv1x1"``.
    in_channels, out_channels : int
        Channel counts.
    dilation : int
        Dilation factor (1 for 1x1 layers).
    has_batch_norm : bool
        Whether batch normalisation follows the convolution.
    dropout_before : float
        Dropout probability applied to the layer input at train time.
    activation : str
        ``"relu"``, ``"softmax"`` or ``"none"``.
    """

    kind: str
    in_channels: int
    out_channels: int
    dilation: int = 1
    has_batch_norm: bool = False
    dropout_before: float = 0.0
    activation: str = "relu"

    @property
    def kernel(self) -> int:
        """Kernel side length."""
        return KERNEL_SIZE[self.kind]

    def validate(self) -> None:
        """Raise InvalidSpecError if the layer is malformed."""
        if self.kind not in KERNEL_SIZE:
            raise InvalidSpecError(f"unknown layer kind: {self.kind}")
        if self.in_channels < 1 or self.out_channels < 1 or self.dilation < 1:
            raise InvalidSpecError(f"non-positive sizes in {self}")
        if self.kind == CONV1X1 and self.dilation != 1:
            raise InvalidSpecError("conv1x1 layers must have dilation 1")
        if not 0.0 <= self.dropout_before < 1.0:
            raise InvalidSpecError(f"dropout must be in [0,1): {self.dropout_before}")
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation: {self.activation}")


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the number of output classes."""

    layers: tuple[LayerSpec, ...]
    num_classes: int

    def validate(self) -> None:
        """Raise InvalidSpecError if the layers do not form a valid network."""
        if not self.layers:
            raise InvalidSpecError("a network needs at least one layer")
        for layer in self.layers:
            layer.validate()
        for prev, layer in zip(self.layers, self.layers[1:]):
            if prev.out_channels != layer.in_channels:
                raise InvalidSpecError(
                    f"channel mismatch: {prev.out_channels} -> {layer.in_channels}"
                )
        softmax = [
            i for i, layer in enumerate(self.layers) if layer.activation == "softmax"
        ]
        if softmax != [len(self.layers) - 1]:
            raise InvalidSpecError("exactly the last layer must use softmax")
        if self.layers[-1].out_channels != self.num_classes:
            raise InvalidSpecError(
                f"last layer has {self.layers[-1].out_channels} units, "
                f"expected {self.num_classes}"
            )
        if self.num_classes < 2:
            raise InvalidSpecError("softmax output needs at least two classes")
        if self.layers[0].in_channels != 1:
            raise InvalidSpecError("the network input is a single intensity channel")


def canonical_spec(
    num_classes: int = 4,
    width: int = CANONICAL_WIDTH,
    dilations: tuple[int, ...] = CANONICAL_DILATIONS,
    batch_norm: bool = True,
    dropout: float = CANONICAL_DROPOUT,
) -> NetworkSpec:
    """Return the canonical spec: 3x3 layers with the given dilations, two 1x1 layers.

    Dropout precedes both 1x1 layers; batch normalisation follows the first
    1x1 layer only.
    """
    layers: list[LayerSpec] = []
    channels = 1
    for dilation in dilations:
        layers.append(LayerSpec(CONV3X3, channels, width, dilation))
        channels = width
    layers.append(
        LayerSpec(
            CONV1X1, width, width, 1, has_batch_norm=batch_norm, dropout_before=dropout
        )
    )
    layers.append(
        LayerSpec(
            CONV1X1, width, num_classes, 1, dropout_before=dropout, activation="softmax"
        )
    )
    return NetworkSpec(tuple(layers), num_classes)


def receptive_field(spec: NetworkSpec) -> tuple[int, int]:
    """Receptive field (rows, cols) of a stack of valid convolutions."""
    size = 1 + sum((layer.kernel - 1) * layer.dilation for layer in spec.layers)
    return size, size


def parameter_count(spec: NetworkSpec) -> int:
    """Number of trainable scalars: weights, biases, and gamma/beta per batch norm."""
    total = 0
    for layer in spec.layers:
        weights = layer.kernel**2 * layer.in_channels * layer.out_channels
        total += weights + layer.out_channels
        if layer.has_batch_norm:
            total += 2 * layer.out_channels
    return total


@dataclass
class TrainingMetadata:
    """Bookkeeping stored alongside the parameters."""

    iteration: int = 0
    seed: int = 0
    validation_score: float = math.nan


@dataclass
class _LayerCache:
    x: np.ndarray
    mask: np.ndarray | None = None
    bn: tc.BatchNormCache | None = None
    pre_activation: np.ndarray | None = None
    probabilities: np.ndarray | None = None


@dataclass
class Network:
    """A dilated network instance: spec, parameters and metadata.

    A Network is also the in-memory form of a checkpoint.

    Attributes
    ----------
    spec : NetworkSpec
        Architecture.
    convs : list[tc.ConvParams]
        Convolution parameters, one per layer.
    norms : dict[int, tc.BatchNormParams]
        Batch normalisation parameters keyed by layer index.
    metadata : TrainingMetadata
        Iteration count, seed and validation score.
    """

    spec: NetworkSpec
    convs: list[tc.ConvParams]
    norms: dict[int, tc.BatchNormParams]
    metadata: TrainingMetadata = field(default_factory=TrainingMetadata)
    _caches: list[_LayerCache] = field(default_factory=list, repr=False)

    @property
    def num_classes(self) -> int:
        """Number of output classes."""
        return self.spec.num_classes

    @property
    def receptive_field(self) -> tuple[int, int]:
        """Receptive field of the network."""
        return receptive_field(self.spec)

    @property
    def margin(self) -> int:
        """Border lost on each side by a forward pass."""
        return (self.receptive_field[0] - 1) // 2

    @property
    def dtype(self) -> np.dtype:
        """Parameter dtype."""
        return self.convs[0].weights.dtype

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order; updating them in place updates the net."""
        params: list[np.ndarray] = []
        for index, conv in enumerate(self.convs):
            params.extend((conv.weights, conv.bias))
            if index in self.norms:
                params.extend((self.norms[index].gamma, self.norms[index].beta))
        return params

    def copy(self) -> Network:
        """Deep copy of parameters and metadata without the backward caches."""
        caches, self._caches = self._caches, []
        try:
            return copy.deepcopy(self)
        finally:
            self._caches = caches

    def astype(self, dtype: npt.DTypeLike) -> Network:
        """Return a copy of the network with parameters cast to ``dtype``."""
        net = self.copy()
        for conv in net.convs:
            conv.weights = conv.weights.astype(dtype)
            conv.bias = conv.bias.astype(dtype)
        for norm in net.norms.values():
            norm.gamma = norm.gamma.astype(dtype)
            norm.beta = norm.beta.astype(dtype)
            norm.running_mean = norm.running_mean.astype(dtype)
            norm.running_var = norm.running_var.astype(dtype)
        return net

    def forward(
        self,
        x: np.ndarray,
        mode: str = "infer",
        rng: np.random.Generator | None = None,
        logits: bool = False,
    ) -> np.ndarray:
        """Apply all layers to a batch of single-channel images.

        Parameters
        ----------
        x : np.ndarray
            Input of shape (N, 1, H, W) with H, W at least the receptive field.
        mode : str, default "infer"
            ``"train"`` uses batch statistics and dropout and keeps the values
            needed by :meth:`backward`; ``"infer"`` uses running statistics.
        rng : np.random.Generator | None
            Dropout randomness, required in train mode when dropout is used.
        logits : bool, default False
            Return the pre-softmax scores instead of probabilities.

        Returns
        -------
        np.ndarray
            Shape (N, num_classes, H - rf + 1, W - rf + 1).
        """
        if mode not in ("train", "infer"):
            raise InvalidArgumentError(f"unknown mode: {mode}")
        if x.ndim != 4 or x.shape[1] != 1:
            raise InvalidArgumentError(f"expected (N,1,H,W) input, got {x.shape}")
        rows, cols = self.receptive_field
        if x.shape[2] < rows or x.shape[3] < cols:
            raise InvalidArgumentError(
                f"input {x.shape[2]}x{x.shape[3]} smaller than "
                f"receptive field {rows}x{cols}"
            )
        train = mode == "train"
        x = np.ascontiguousarray(x, dtype=self.dtype)
        caches: list[_LayerCache] = []
        for index, (layer, conv) in enumerate(zip(self.spec.layers, self.convs)):
            mask = None
            if train and layer.dropout_before > 0.0:
                if rng is None:
                    raise InvalidArgumentError("train mode with dropout needs an rng")
                mask = tc.dropout_mask(x.shape, layer.dropout_before, rng, self.dtype)
                x = x * mask
            cache = _LayerCache(x=x, mask=mask)
            z = tc.conv2d_dilated(x, conv)
            if layer.has_batch_norm:
                result = tc.batch_norm(z, self.norms[index], mode)
                z, cache.bn = result.output, result.cache
                if train:
                    self.norms[index] = result.params
            if layer.activation == "relu":
                cache.pre_activation = z
                x = tc.relu(z)
            elif layer.activation == "softmax":
                if logits:
                    return z
                x = tc.softmax_channels(z)
                cache.probabilities = x
            else:
                x = z
            caches.append(cache)
        if train:
            self._caches = caches
        return x

    def backward(self, grad_probabilities: np.ndarray) -> list[np.ndarray]:
        """Backpropagate through the last train-mode forward pass.

        Parameters
        ----------
        grad_probabilities : np.ndarray
            Gradient of the loss with respect to the forward output.

        Returns
        -------
        list[np.ndarray]
            Gradients aligned with :meth:`parameters`.
        """
        if len(self._caches) != len(self.spec.layers):
            raise InvalidArgumentError("backward needs a preceding train-mode forward")
        grads: list[list[np.ndarray]] = []
        grad = grad_probabilities.astype(self.dtype)
        for index in reversed(range(len(self.spec.layers))):
            layer, conv = self.spec.layers[index], self.convs[index]
            cache = self._caches[index]
            if layer.activation == "softmax":
                grad = tc.softmax_channels_grad(cache.probabilities, grad)
            elif layer.activation == "relu":
                grad = tc.relu_grad(cache.pre_activation, grad)
            layer_grads: list[np.ndarray] = []
            if layer.has_batch_norm:
                grad, grad_gamma, grad_beta = tc.batch_norm_grad(cache.bn, grad)
                layer_grads = [grad_gamma, grad_beta]
            grad, grad_weights, grad_bias = tc.conv2d_dilated_grad(cache.x, conv, grad)
            if cache.mask is not None:
                grad = grad * cache.mask
            grads.append([grad_weights, grad_bias, *layer_grads])
        return [g for layer_grads in reversed(grads) for g in layer_grads]


def build_network(
    num_classes: int,
    rng: np.random.Generator,
    spec: NetworkSpec | None = None,
    dtype: npt.DTypeLike = np.float32,
) -> Network:
    """Instantiate a network with He-uniform weights and zero biases.

    Parameters
    ----------
    num_classes : int
        2 or 4 output classes.
    rng : np.random.Generator
        Initialisation randomness.
    spec : NetworkSpec | None, default None
        Architecture; the canonical one when None.
    dtype : DTypeLike, default float32
        Parameter dtype.

    Returns
    -------
    Network
        The initialised network.
    """
    if num_classes not in SUPPORTED_CLASSES:
        raise InvalidArgumentError(
            f"unsupported class count {num_classes}, "
            f"expected one of {SUPPORTED_CLASSES}"
        )
    spec = canonical_spec(num_classes) if spec is None else spec
    if spec.num_classes != num_classes:
        raise InvalidArgumentError(
            f"spec has {spec.num_classes} classes, requested {num_classes}"
        )
    spec.validate()
    convs: list[tc.ConvParams] = []
    norms: dict[int, tc.BatchNormParams] = {}
    for index, layer in enumerate(spec.layers):
        fan_in = layer.in_channels * layer.kernel**2
        bound = math.sqrt(6.0 / fan_in)
        shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        weights = rng.uniform(-bound, bound, size=shape).astype(dtype)
        bias = np.zeros(layer.out_channels, dtype=dtype)
        convs.append(tc.ConvParams(weights, bias, layer.dilation))
        if layer.has_batch_norm:
            norms[index] = tc.BatchNormParams.identity(layer.out_channels, dtype)
    logger.debug(
        "build_network(): %d layers, %d parameters",
        len(spec.layers),
        parameter_count(spec),
    )
    return Network(spec, convs, norms)


_ACTIVATION_CODE: dict[str, int] = {name: code for code, name in enumerate(ACTIVATIONS)}
_KIND_CODE: dict[str, int] = {CONV3X3: 0, CONV1X1: 1}
_CODE_KIND: dict[int, str] = {code: kind for kind, code in _KIND_CODE.items()}


def _f32(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def _layer_flags(layer: LayerSpec) -> int:
    steps = layer.dropout_before * DROPOUT_STEPS
    if steps != round(steps):
        raise InvalidArgumentError(
            f"dropout {layer.dropout_before} is not a multiple of 1/{DROPOUT_STEPS}"
        )
    return (
        int(layer.has_batch_norm)
        | (_ACTIVATION_CODE[layer.activation] << 1)
        | (int(round(steps)) << 3)
    )


def checkpoint_bytes(net: Network) -> bytes:
    """Serialise a network to the little-endian checkpoint layout."""
    spec = net.spec
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<III", CHECKPOINT_VERSION, spec.num_classes, len(spec.layers)),
    ]
    for layer, conv in zip(spec.layers, net.convs):
        parts.append(
            struct.pack(
                "<BIIIB",
                _KIND_CODE[layer.kind],
                layer.in_channels,
                layer.out_channels,
                layer.dilation,
                _layer_flags(layer),
            )
        )
        parts.extend((_f32(conv.weights), _f32(conv.bias)))
    for index in sorted(net.norms):
        norm = net.norms[index]
        stats = (norm.gamma, norm.beta, norm.running_mean, norm.running_var)
        parts.extend(_f32(a) for a in stats)
    meta = net.metadata
    parts.append(
        struct.pack("<QQf", meta.iteration, meta.seed, meta.validation_score)
    )
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: Network, path: str | Path) -> None:
    """Write ``net`` to ``path``.

    Parameters
    ----------
    net : Network
        The network to save.
    path : str | Path
        Destination file.
    """
    data = checkpoint_bytes(net)
    Path(path).write_bytes(data)
    logger.info("checkpoint written to: %s (%d bytes)", path, len(data))


class _Reader:
    """Sequential little-endian reader raising CorruptCheckpointError on truncation."""

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        size = 4 * count
        if self.offset + size > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        array = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.offset)
        self.offset += size
        return array.astype(np.float32).reshape(shape)


def network_from_bytes(data: bytes, expected_classes: int | None = None) -> Network:
    """Parse checkpoint bytes, verifying magic, version and CRC."""
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("bad checkpoint magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checkpoint CRC mismatch")
    reader = _Reader(body)
    reader.offset = len(CHECKPOINT_MAGIC)
    version, num_classes, count = reader.unpack("<III")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    layers: list[LayerSpec] = []
    convs: list[tc.ConvParams] = []
    for _ in range(count):
        kind, in_ch, out_ch, dilation, flags = reader.unpack("<BIIIB")
        activation = (flags >> 1) & 0b11
        if kind not in _CODE_KIND or activation >= len(ACTIVATIONS):
            raise InvalidCheckpointError(f"unknown layer encoding {kind}/{flags}")
        layer = LayerSpec(
            _CODE_KIND[kind],
            in_ch,
            out_ch,
            dilation,
            has_batch_norm=bool(flags & 1),
            dropout_before=(flags >> 3) / DROPOUT_STEPS,
            activation=ACTIVATIONS[activation],
        )
        k = layer.kernel
        weights = reader.floats((out_ch, in_ch, k, k))
        bias = reader.floats((out_ch,))
        layers.append(layer)
        try:
            convs.append(tc.ConvParams(weights, bias, dilation))
        except InvalidArgumentError as err:
            raise InvalidCheckpointError(str(err)) from err
    spec = NetworkSpec(tuple(layers), num_classes)
    try:
        spec.validate()
    except InvalidSpecError as err:
        raise InvalidCheckpointError(str(err)) from err
    norms: dict[int, tc.BatchNormParams] = {}
    for index, layer in enumerate(layers):
        if layer.has_batch_norm:
            gamma, beta, mean, var = (
                reader.floats((layer.out_channels,)) for _ in range(4)
            )
            try:
                norms[index] = tc.BatchNormParams(gamma, beta, mean, var)
            except InvalidArgumentError as err:
                raise InvalidCheckpointError(str(err)) from err
    iteration, seed, score = reader.unpack("<QQf")
    if reader.offset != len(body):
        raise CorruptCheckpointError("trailing bytes after checkpoint metadata")
    if expected_classes is not None and num_classes != expected_classes:
        raise InvalidCheckpointError(
            f"checkpoint has {num_classes} classes, expected {expected_classes}"
        )
    return Network(spec, convs, norms, TrainingMetadata(iteration, seed, float(score)))


def load_checkpoint(path: str | Path, expected_classes: int | None = None) -> Network:
    """Read a network written by :func:`save_checkpoint`.

    Parameters
    ----------
    path : str | Path
        Checkpoint file.
    expected_classes : int | None, default None
        When given, a checkpoint with another class count is rejected.

    Returns
    -------
    Network
        The restored network.
    """
    logger.debug("load_checkpoint(): %s", path)
    return network_from_bytes(Path(path).read_bytes(), expected_classes)


def describe(net: Network) -> str:
    """Multi-line summary of a network: layers, receptive field and parameter count."""
    rows, cols = net.receptive_field
    lines = [f"num_classes={net.num_classes}", f"layers={len(net.spec.layers)}"]
    for index, layer in enumerate(net.spec.layers, start=1):
        extras = []
        if layer.dropout_before:
            extras.append(f"dropout={layer.dropout_before:g}")
        if layer.has_batch_norm:
            extras.append("batch_norm")
        lines.append(
            f"layer {index}: {layer.kind} {layer.in_channels}->{layer.out_channels} "
            f"dilation={layer.dilation} {layer.activation} {' '.join(extras)}".rstrip()
        )
    meta = net.metadata
    lines.extend(
        [
            f"receptive_field={rows}x{cols}",
            f"parameter_count={parameter_count(net.spec)}",
            f"iteration={meta.iteration} seed={meta.seed} "
            f"validation_score={meta.validation_score:.4f}",
        ]
    )
    return "\n".join(lines)
