"""aortaseg: Tri-planar segmentation pipeline.

A volume is normalised and resampled to 1 mm, every axial, coronal and
sagittal slice is classified by the network, the three probability maps are
averaged, resampled back to the original grid, labelled by argmax and reduced
to the largest connected component per class.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor_core as tc
from .dilated_net import Network
from .errors import InvalidArgumentError
from .utils import chunks, parallel_map
from .volume import (
    ALL_PLANES,
    BACKGROUND,
    IntensityUnit,
    LabelVolume,
    Plane,
    ProbabilityVolume,
    Spacing,
    Volume,
)

logger = logging.getLogger("aortaseg:pipeline")

HU_MIN: float = -1024.0
HU_MAX: float = 3071.0
PAD_VALUE: float = 0.0
ISOTROPIC: Spacing = (1.0, 1.0, 1.0)
SLICES_PER_BATCH: int = 4

# face, edge and corner neighbours
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class SegmentationResult:
    """Output of :func:`segment`.

    Attributes
    ----------
    labels : LabelVolume
        Final labels on the input grid.
    probabilities : ProbabilityVolume
        Fused probabilities at 1 mm isotropic spacing.
    seconds : float
        Wall time of the segmentation.
    """

    labels: LabelVolume
    probabilities: ProbabilityVolume
    seconds: float


def normalize_intensities(volume: Volume) -> Volume:
    """Clamp Hounsfield units to [-1024, 3071] and map them linearly onto [0, 1]."""
    if volume.unit is not IntensityUnit.HOUNSFIELD:
        raise InvalidArgumentError(
            "normalize_intensities() expects a Hounsfield volume"
        )
    data = np.clip(volume.data.astype(np.float32), HU_MIN, HU_MAX)
    data = (data - HU_MIN) / (HU_MAX - HU_MIN)
    return Volume(data.astype(np.float32), volume.spacing, IntensityUnit.NORMALIZED)


def target_dims(
    dims: Sequence[int], spacing: Spacing, target_spacing: Spacing
) -> tuple[int, int, int]:
    """Grid size preserving the physical extent, rounded half up, at least 1."""
    return tuple(  # type: ignore[return-value]
        max(1, math.floor(n * s / t + 0.5))
        for n, s, t in zip(dims, spacing, target_spacing)
    )


def source_coordinates(
    src_dim: int, src_spacing: float, dst_dim: int, dst_spacing: float
) -> np.ndarray:
    """Continuous source indices of destination voxel centres, clamped to the source."""
    centres = (np.arange(dst_dim, dtype=np.float64) + 0.5) * dst_spacing
    return np.clip(centres / src_spacing - 0.5, 0.0, src_dim - 1.0)


def _resample_array(
    array: np.ndarray,
    spacing: Spacing,
    target_spacing: Spacing,
    dims: tuple[int, int, int],
    order: int,
) -> np.ndarray:
    axes = [
        source_coordinates(n, s, m, t)
        for n, s, m, t in zip(array.shape, spacing, dims, target_spacing)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    return ndimage.map_coordinates(array, grid, order=order, mode="nearest")


def _same_grid(
    dims: Sequence[int], spacing: Spacing, new_dims: Sequence[int], target: Spacing
) -> bool:
    return tuple(dims) == tuple(new_dims) and tuple(spacing) == tuple(target)


def resample_trilinear(
    volume: Volume | ProbabilityVolume,
    target_spacing: Spacing,
    dims: tuple[int, int, int] | None = None,
) -> Volume | ProbabilityVolume:
    """Trilinear resampling of a scalar or probability volume.

    Parameters
    ----------
    volume : Volume | ProbabilityVolume
        Source volume.
    target_spacing : Spacing
        Output voxel size in mm.
    dims : tuple[int, int, int] | None, default None
        Output grid; derived from the physical extent when None.

    Returns
    -------
    Volume | ProbabilityVolume
        The resampled volume, of the same type as the input.
    """
    target_spacing = tuple(float(t) for t in target_spacing)  # type: ignore[assignment]
    if len(target_spacing) != 3 or min(target_spacing) <= 0:
        raise InvalidArgumentError(f"invalid target spacing {target_spacing}")
    if dims is None:
        dims = target_dims(volume.dims, volume.spacing, target_spacing)
    identity = _same_grid(volume.dims, volume.spacing, dims, target_spacing)
    if isinstance(volume, ProbabilityVolume):
        if identity:
            return ProbabilityVolume(volume.data.copy(), volume.spacing)
        data = np.stack(
            [
                _resample_array(channel, volume.spacing, target_spacing, dims, 1)
                for channel in volume.data
            ]
        )
        return ProbabilityVolume(data, target_spacing)
    if identity:
        return Volume(volume.data.copy(), volume.spacing, volume.unit)
    source = volume.data
    if not np.issubdtype(source.dtype, np.floating):
        source = source.astype(np.float32)
    data = _resample_array(source, volume.spacing, target_spacing, dims, 1)
    return Volume(data, target_spacing, volume.unit)


def resample_labels_nearest(
    labels: LabelVolume,
    target_spacing: Spacing,
    dims: tuple[int, int, int] | None = None,
) -> LabelVolume:
    """Nearest-neighbour resampling of a label volume."""
    target_spacing = tuple(float(t) for t in target_spacing)  # type: ignore[assignment]
    if dims is None:
        dims = target_dims(labels.dims, labels.spacing, target_spacing)
    if _same_grid(labels.dims, labels.spacing, dims, target_spacing):
        return LabelVolume(labels.data.copy(), labels.spacing, labels.class_count)
    data = _resample_array(labels.data, labels.spacing, target_spacing, dims, 0)
    return LabelVolume(data.astype(np.uint8), target_spacing, labels.class_count)


def prepare_volume(volume: Volume) -> Volume:
    """Normalise (when in Hounsfield units) and resample to 1 mm isotropic."""
    if volume.unit is IntensityUnit.HOUNSFIELD:
        volume = normalize_intensities(volume)
    return resample_trilinear(volume, ISOTROPIC)  # type: ignore[return-value]


def infer_plane(
    net: Network,
    volume: Volume,
    plane: Plane,
    threads: int | None = None,
    slices_per_batch: int = SLICES_PER_BATCH,
) -> ProbabilityVolume:
    """Classify every slice of one plane orientation.

    Each slice is padded with the network margin (65 voxels for the
    canonical network) of value 0, so the output keeps the slice size.

    Parameters
    ----------
    net : Network
        Trained network.
    volume : Volume
        Normalised volume at 1 mm isotropic spacing.
    plane : Plane
        Slice orientation.
    threads : int | None, default None
        Worker threads; read from ``AORTASEG_THREADS`` when None.
    slices_per_batch : int, default 4
        Slices per forward pass; fixed independently of the thread count.

    Returns
    -------
    ProbabilityVolume
        Per-class probabilities on the volume grid.
    """
    plane = Plane(plane)
    if volume.unit is not IntensityUnit.NORMALIZED:
        raise InvalidArgumentError("infer_plane() expects normalised intensities")
    if tuple(volume.spacing) != ISOTROPIC:
        raise InvalidArgumentError(
            f"infer_plane() expects 1 mm voxels, got {volume.spacing}"
        )
    logger.debug("infer_plane(): %s, %d slices", plane.value, volume.dims[plane.axis])
    data = volume.data.astype(net.dtype)
    axis = plane.axis
    out = np.empty((net.num_classes, *volume.dims), dtype=np.float32)

    def run(indices: range) -> None:
        slices = np.stack([np.take(data, i, axis=axis) for i in indices])[:, None]
        probs = net.forward(tc.pad2d(slices, net.margin, PAD_VALUE), "infer")
        for k, i in enumerate(indices):
            target: list[slice | int] = [slice(None)] * 4
            target[axis + 1] = i
            out[tuple(target)] = probs[k]

    parallel_map(run, list(chunks(volume.dims[axis], slices_per_batch)), threads)
    return ProbabilityVolume(out, volume.spacing)


def fuse_probabilities(maps: Sequence[ProbabilityVolume]) -> ProbabilityVolume:
    """Per-voxel, per-class arithmetic mean of probability maps.

    Values are sorted across maps before summation, which makes the result
    bit-identical under any ordering of the inputs.
    """
    if not maps:
        raise InvalidArgumentError("nothing to fuse")
    first = maps[0]
    for other in maps[1:]:
        if other.data.shape != first.data.shape or tuple(other.spacing) != tuple(
            first.spacing
        ):
            raise InvalidArgumentError(
                f"cannot fuse {other.data.shape}@{other.spacing} "
                f"with {first.data.shape}@{first.spacing}"
            )
    stacked = np.sort(np.stack([m.data for m in maps]), axis=0)
    fused = stacked.sum(axis=0, dtype=np.float64) / len(maps)
    return ProbabilityVolume(fused.astype(np.float32), first.spacing)


def argmax_labels(probabilities: ProbabilityVolume) -> LabelVolume:
    """Most probable class per voxel; ties go to the lowest class index."""
    data = np.argmax(probabilities.data, axis=0).astype(np.uint8)
    return LabelVolume(data, probabilities.spacing, probabilities.class_count)


def largest_component_filter(labels: LabelVolume) -> LabelVolume:
    """Keep only the largest 26-connected component of each foreground class.

    Equal-sized components are resolved in favour of the one met first in a
    z-major scan.
    """
    data = labels.data.copy()
    for cls in range(1, labels.class_count):
        mask = labels.data == cls
        components, count = ndimage.label(mask, structure=CONNECTIVITY_26)
        if count <= 1:
            continue
        sizes = np.bincount(components.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        data[mask & (components != keep)] = BACKGROUND
        logger.debug(
            "largest_component_filter(): class %d kept %d of %d voxels",
            cls,
            sizes[keep - 1],
            int(sizes.sum()),
        )
    return LabelVolume(data, labels.spacing, labels.class_count)


def segment(
    net: Network,
    volume: Volume,
    planes: Sequence[Plane] = ALL_PLANES,
    threads: int | None = None,
    slices_per_batch: int = SLICES_PER_BATCH,
) -> SegmentationResult:
    """Segment a CT-like volume end to end.

    Parameters
    ----------
    net : Network
        Trained network.
    volume : Volume
        Input volume, normally in Hounsfield units at any spacing.
    planes : Sequence[Plane], default all three
        Orientations to analyse; ``(Plane.AXIAL,)`` is the fast mode.
    threads : int | None, default None
        Worker threads for slice inference.
    slices_per_batch : int, default 4
        Slices per forward pass.

    Returns
    -------
    SegmentationResult
        Labels at the input resolution and fused probabilities at 1 mm.
    """
    logger.debug("segment(): dims %s spacing %s", volume.dims, volume.spacing)
    start = time.perf_counter()
    isotropic = prepare_volume(volume)
    maps = [infer_plane(net, isotropic, p, threads, slices_per_batch) for p in planes]
    fused = fuse_probabilities(maps)
    back = resample_trilinear(fused, volume.spacing, dims=volume.dims)
    back.data /= back.data.sum(axis=0, keepdims=True)
    labels = largest_component_filter(argmax_labels(back))  # type: ignore[arg-type]
    seconds = time.perf_counter() - start
    logger.info("segmented volume %s in %.1f s", volume.dims, seconds)
    return SegmentationResult(labels, fused, seconds)
