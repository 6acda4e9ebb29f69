"""aortaseg: Network training.

Mini-batches of sub-images are drawn uniformly from the axial, coronal and
sagittal slices of the training volumes, scored with a multi-class soft Dice
loss and optimised with Adam. The network with the best validation Dice is
returned.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dilated_net import (
    SUPPORTED_CLASSES,
    Network,
    NetworkSpec,
    TrainingMetadata,
    build_network,
    canonical_spec,
    receptive_field,
)
from .errors import InvalidArgumentError, NumericalFailureError, TrainingAbortedError
from .metrics import class_mask, dice_coefficient
from .pipeline import (
    ISOTROPIC,
    PAD_VALUE,
    prepare_volume,
    resample_labels_nearest,
    segment,
)
from .record import TrainingLog
from .volume import ALL_PLANES, BACKGROUND, LabelVolume, Plane, Volume

logger = logging.getLogger("aortaseg:trainer")

DICE_SMOOTHING: float = 1e-5

Pair = tuple[Volume, LabelVolume]


@dataclass
class TrainConfig:  # pylint: disable=too-many-instance-attributes
    """Training hyper-parameters.

    Attributes
    ----------
    iterations : int
        Optimiser steps.
    batch_size : int
        Sub-images per mini-batch.
    subimage_size : int
        Side of the square sub-images.
    learning_rate : float
        Adam step size.
    seed : int
        Seed of initialisation, sampling and dropout.
    validation_interval : int
        Iterations between validation runs.
    class_count : int
        2 or 4 output classes.
    fast_validation : bool
        Validate on axial slices only.
    beta1, beta2, epsilon : float
        Adam constants.
    """

    iterations: int = 10000
    batch_size: int = 16
    subimage_size: int = 281
    learning_rate: float = 0.001
    seed: int = 0
    validation_interval: int = 500
    class_count: int = 4
    fast_validation: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def output_size(self, field_size: int) -> int:
        """Side of the labelled output region of a sub-image."""
        return self.subimage_size - (field_size - 1)

    def validate(self, field_size: int) -> None:
        """Check the configuration against a network receptive field."""
        if self.iterations < 0:
            raise InvalidArgumentError("iterations must be non-negative")
        if self.batch_size < 1 or self.validation_interval < 1:
            raise InvalidArgumentError(
                "batch size and validation interval must be positive"
            )
        if self.learning_rate < 0:
            raise InvalidArgumentError("learning rate must be non-negative")
        if self.class_count not in SUPPORTED_CLASSES:
            raise InvalidArgumentError(f"unsupported class count {self.class_count}")
        if self.output_size(field_size) < 1:
            raise InvalidArgumentError(
                f"sub-images of {self.subimage_size} are smaller than the "
                f"receptive field {field_size}"
            )


@dataclass
class AdamState:
    """Moment estimates and constants of the Adam optimiser."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(
        cls,
        params: Sequence[np.ndarray],
        learning_rate: float = 0.001,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> AdamState:
        """Zero moments shaped like ``params``."""
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


class SamplePair(NamedTuple):
    """A training sub-image with the labels of its output region."""

    image: np.ndarray
    labels: np.ndarray
    plane: Plane


class SampleLocation(NamedTuple):
    """Where a sub-image is cut: volume, plane, slice and top-left corner."""

    volume: int
    plane: Plane
    slice: int
    row: int
    col: int


def soft_dice_loss(
    probabilities: np.ndarray, labels: np.ndarray, smoothing: float = DICE_SMOOTHING
) -> tuple[float, np.ndarray]:
    """Multi-class soft Dice loss and its gradient.

    Per class ``D = (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s)`` with sums
    over the batch and both spatial axes; the loss is one minus the mean of
    ``D`` over all classes, background included.

    Parameters
    ----------
    probabilities : np.ndarray
        Softmax output of shape (N, C, H, W).
    labels : np.ndarray
        Integer labels of shape (N, H, W).
    smoothing : float, default 1e-5
        Added to numerator and denominator.

    Returns
    -------
    tuple[float, np.ndarray]
        The loss and its gradient with respect to ``probabilities``.
    """
    if probabilities.ndim != 4:
        raise InvalidArgumentError(
            f"expected (N,C,H,W) probabilities, got {probabilities.shape}"
        )
    n, c, h, w = probabilities.shape
    if labels.shape != (n, h, w):
        raise InvalidArgumentError(
            f"labels {labels.shape} do not match probabilities {probabilities.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InvalidArgumentError(f"labels outside 0..{c - 1}")
    p = probabilities
    g = (labels[:, None, :, :] == np.arange(c)[None, :, None, None]).astype(p.dtype)
    axes = (0, 2, 3)
    numerator = 2.0 * (p * g).sum(axis=axes) + smoothing
    denominator = (p * p).sum(axis=axes) + g.sum(axis=axes) + smoothing
    dice = numerator / denominator
    loss = 1.0 - float(dice.mean())
    per_class = (slice(None), None, None)
    grad = -(
        2.0 * g * denominator[per_class] - 2.0 * p * numerator[per_class]
    ) / (denominator[per_class] ** 2 * c)
    return loss, grad.astype(p.dtype)


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[Sequence[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place.

    Raises
    ------
    NumericalFailureError
        If any gradient holds NaN or infinity; parameters are left untouched.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidArgumentError("parameters, gradients and moments differ in length")
    for index, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise InvalidArgumentError(
                f"gradient {index} has shape {grad.shape}, parameter {param.shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NumericalFailureError(f"non-finite gradient for parameter {index}")
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for param, grad, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        denominator = np.sqrt(v / correction2) + state.epsilon
        step = state.learning_rate * (m / correction1) / denominator
        param -= step.astype(param.dtype)
    return params, state


def draw_sample_location(
    shapes: Sequence[tuple[int, int, int]],
    config: TrainConfig,
    rng: np.random.Generator,
) -> SampleLocation:
    """Choose volume, plane, slice and corner uniformly at random.

    Corners range over every position where the sub-image covers the slice
    as far as possible; a slice smaller than a sub-image lies inside it.
    """
    index = int(rng.integers(len(shapes)))
    plane = ALL_PLANES[int(rng.integers(len(ALL_PLANES)))]
    dims = shapes[index]
    position = int(rng.integers(dims[plane.axis]))
    rows, cols = (n for axis, n in enumerate(dims) if axis != plane.axis)
    size = config.subimage_size
    row = int(rng.integers(min(0, rows - size), max(0, rows - size) + 1))
    col = int(rng.integers(min(0, cols - size), max(0, cols - size) + 1))
    return SampleLocation(index, plane, position, row, col)


def extract_sample(
    pair: Pair, location: SampleLocation, size: int, field_size: int
) -> SamplePair:
    """Cut a sub-image and its central label patch, padding outside the slice."""
    volume, labels = pair
    axis = location.plane.axis
    image_slice = np.take(volume.data, location.slice, axis=axis)
    label_slice = np.take(labels.data, location.slice, axis=axis)
    image = np.full((size, size), PAD_VALUE, dtype=np.float32)
    patch = np.full((size, size), BACKGROUND, dtype=np.uint8)
    rows, cols = image_slice.shape
    r0, r1 = max(location.row, 0), min(location.row + size, rows)
    c0, c1 = max(location.col, 0), min(location.col + size, cols)
    target = (
        slice(r0 - location.row, r1 - location.row),
        slice(c0 - location.col, c1 - location.col),
    )
    image[target] = image_slice[r0:r1, c0:c1]
    patch[target] = label_slice[r0:r1, c0:c1]
    margin = (field_size - 1) // 2
    out = size - (field_size - 1)
    window = slice(margin, margin + out)
    return SamplePair(image[None], patch[window, window], location.plane)


def sample_minibatch(
    dataset: Sequence[Pair],
    config: TrainConfig,
    rng: np.random.Generator,
    field_size: int = 131,
) -> list[SamplePair]:
    """Draw ``config.batch_size`` sub-images from normalised 1 mm volumes.

    Parameters
    ----------
    dataset : Sequence[Pair]
        Prepared (volume, labels) pairs.
    config : TrainConfig
        Supplies batch and sub-image sizes.
    rng : np.random.Generator
        Sampling randomness.
    field_size : int, default 131
        Receptive field of the network being trained.

    Returns
    -------
    list[SamplePair]
        The mini-batch.
    """
    if not dataset:
        raise InvalidArgumentError("cannot sample from an empty dataset")
    shapes = [volume.dims for volume, _ in dataset]
    batch = []
    for _ in range(config.batch_size):
        location = draw_sample_location(shapes, config, rng)
        pair = dataset[location.volume]
        batch.append(extract_sample(pair, location, config.subimage_size, field_size))
    return batch


def stack_batch(samples: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into images (N, 1, S, S) and labels (N, O, O)."""
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples])
    return images, labels


def _with_classes(labels: LabelVolume, class_count: int) -> LabelVolume:
    if labels.class_count == class_count:
        return labels
    if class_count == 2:
        return labels.to_two_class()
    raise InvalidArgumentError(
        f"cannot train {class_count} classes on {labels.class_count}-class labels"
    )


def prepare_dataset(pairs: Sequence[Pair], class_count: int = 4) -> list[Pair]:
    """Normalise and resample volumes to 1 mm; labels follow by nearest neighbour."""
    prepared = []
    for volume, labels in pairs:
        if volume.dims != labels.dims:
            raise InvalidArgumentError(
                f"volume {volume.dims} and labels {labels.dims} differ"
            )
        iso = prepare_volume(volume)
        iso_labels = resample_labels_nearest(
            _with_classes(labels, class_count), ISOTROPIC, dims=iso.dims
        )
        prepared.append((iso, iso_labels))
    return prepared


def validate(
    net: Network,
    validation_set: Sequence[Pair],
    fast: bool = False,
    threads: int | None = None,
) -> float:
    """Mean foreground Dice of full segmentations of the validation volumes.

    Classes absent from both prediction and reference are left out; a set
    with no scorable class counts as perfect.

    Parameters
    ----------
    net : Network
        Network to score.
    validation_set : Sequence[Pair]
        Raw (volume, labels) pairs.
    fast : bool, default False
        Segment from axial slices only.
    threads : int | None, default None
        Worker threads of the segmentation.

    Returns
    -------
    float
        Score in [0, 1].
    """
    if not validation_set:
        raise InvalidArgumentError("empty validation set")
    planes = (Plane.AXIAL,) if fast else ALL_PLANES
    scores: list[float] = []
    for volume, labels in validation_set:
        reference = _with_classes(labels, net.num_classes)
        predicted = segment(net, volume, planes=planes, threads=threads).labels
        for cls in range(1, net.num_classes):
            dice = dice_coefficient(
                class_mask(predicted, cls), class_mask(reference, cls)
            )
            if dice is not None:
                scores.append(dice)
    return float(np.mean(scores)) if scores else 1.0


@dataclass
class _Tracker:
    best: Network | None = None
    best_score: float = -math.inf
    last_good: Network | None = None


def _overlaps(dataset: Sequence[Pair], validation_set: Sequence[Pair]) -> bool:
    training = {id(volume) for volume, _ in dataset}
    return any(id(volume) in training for volume, _ in validation_set)


def train(
    dataset: Sequence[Pair],
    validation_set: Sequence[Pair],
    config: TrainConfig,
    spec: NetworkSpec | None = None,
    log: TrainingLog | None = None,
) -> tuple[Network, TrainingLog]:
    """Train a network and keep the best validated parameters.

    Parameters
    ----------
    dataset : Sequence[Pair]
        Training (volume, labels) pairs at any spacing.
    validation_set : Sequence[Pair]
        Validation pairs, disjoint from ``dataset``; may be empty.
    config : TrainConfig
        Hyper-parameters.
    spec : NetworkSpec | None, default None
        Architecture; the canonical one when None.
    log : TrainingLog | None, default None
        Log to extend.

    Returns
    -------
    tuple[Network, TrainingLog]
        The best network (the final one without validation) and the log.

    Raises
    ------
    TrainingAbortedError
        On a non-finite loss or gradient; carries the last good network.
    """
    spec = spec or canonical_spec(config.class_count)
    field_size = receptive_field(spec)[0]
    config.validate(field_size)
    if not dataset:
        raise InvalidArgumentError("empty training set")
    if _overlaps(dataset, validation_set):
        raise InvalidArgumentError("training and validation sets overlap")
    log = TrainingLog() if log is None else log
    init_seq, sample_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(3)
    net = build_network(config.class_count, np.random.default_rng(init_seq), spec)
    net.metadata = TrainingMetadata(iteration=0, seed=config.seed)
    if config.iterations == 0:
        return net, log

    prepared = prepare_dataset(dataset, config.class_count)
    logger.info(
        "training %d iterations on %d volumes, validating on %d",
        config.iterations,
        len(prepared),
        len(validation_set),
    )
    sample_rng = np.random.default_rng(sample_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = AdamState.create(
        net.parameters(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.epsilon,
    )
    tracker = _Tracker(last_good=net.copy())
    for iteration in range(1, config.iterations + 1):
        samples = sample_minibatch(prepared, config, sample_rng, field_size)
        images, labels = stack_batch(samples)
        probabilities = net.forward(images, "train", dropout_rng)
        loss, grad = soft_dice_loss(probabilities, labels)
        try:
            if not math.isfinite(loss):
                raise NumericalFailureError(f"non-finite loss {loss}")
            adam_step(net.parameters(), net.backward(grad), state)
        except NumericalFailureError as err:
            message = f"training aborted at iteration {iteration}: {err}"
            logger.error(message)
            kept = tracker.best or tracker.last_good
            raise TrainingAbortedError(message, kept, log) from err
        net.metadata.iteration = iteration
        tracker.last_good = net.copy()
        score = None
        due = iteration % config.validation_interval == 0
        if validation_set and (due or iteration == config.iterations):
            score = validate(net, validation_set, fast=config.fast_validation)
            if score > tracker.best_score:
                tracker.best_score = score
                tracker.best = net.copy()
                tracker.best.metadata.validation_score = float(np.float32(score))
        log.add(iteration, loss, score)
    if tracker.best is None:
        return net, log
    logger.info(
        "best validation dice %.4f at iteration %d",
        tracker.best_score,
        tracker.best.metadata.iteration,
    )
    return tracker.best, log
