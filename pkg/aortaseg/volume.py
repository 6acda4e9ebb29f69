"""aortaseg: Volume types.

Arrays are stored z-major, i.e. with shape (nz, ny, nx), and spacings are
given in the same (sz, sy, sx) order in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidArgumentError

Spacing = tuple[float, float, float]

BACKGROUND: int = 0
CLASS_NAMES: dict[int, tuple[str, ...]] = {
    4: ("background", "ascending_aorta", "aortic_arch", "descending_aorta"),
    2: ("background", "thoracic_aorta"),
}
MERGED_NAME: str = "thoracic_aorta"


class IntensityUnit(str, Enum):
    """Unit tag of a scalar volume."""

    HOUNSFIELD = "hounsfield"
    NORMALIZED = "normalized"


class Plane(str, Enum):
    """Slice orientation; each plane fixes one array axis."""

    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        """Array axis held fixed by slices of this plane."""
        return {Plane.AXIAL: 0, Plane.CORONAL: 1, Plane.SAGITTAL: 2}[self]


ALL_PLANES: tuple[Plane, ...] = (Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL)


def _check_grid(shape: tuple[int, ...], spacing: Spacing) -> Spacing:
    if len(shape) != 3 or min(shape) < 1:
        raise InvalidArgumentError(f"volume dims must be three positive sizes: {shape}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or min(spacing) <= 0:
        raise InvalidArgumentError(f"spacing must be three positive values: {spacing}")
    return spacing  # type: ignore[return-value]


def class_names(class_count: int) -> tuple[str, ...]:
    """Names of the classes for a two- or four-class labelling."""
    if class_count not in CLASS_NAMES:
        raise InvalidArgumentError(f"no class names for {class_count} classes")
    return CLASS_NAMES[class_count]


@dataclass
class Volume:
    """Scalar volume (CT intensities or normalised intensities).

    Attributes
    ----------
    data : np.ndarray
        Array of shape (nz, ny, nx).
    spacing : Spacing
        Voxel size (sz, sy, sx) in mm.
    unit : IntensityUnit
        Whether values are Hounsfield units or normalised to [0, 1].
    """

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    unit: IntensityUnit = IntensityUnit.HOUNSFIELD

    def __post_init__(self) -> None:
        self.spacing = _check_grid(self.data.shape, self.spacing)
        self.unit = IntensityUnit(self.unit)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx)."""
        return self.data.shape  # type: ignore[return-value]


@dataclass
class LabelVolume:
    """Per-voxel class identifiers.

    Attributes
    ----------
    data : np.ndarray
        ``uint8`` array of shape (nz, ny, nx).
    spacing : Spacing
        Voxel size in mm.
    class_count : int
        Number of classes including background.
    """

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    class_count: int = 4

    def __post_init__(self) -> None:
        self.spacing = _check_grid(self.data.shape, self.spacing)
        if self.class_count < 2 or self.class_count > 255:
            raise InvalidArgumentError(f"invalid class count {self.class_count}")
        raw = np.asarray(self.data)
        if raw.size:
            if raw.dtype.kind not in "biu" and not np.array_equal(raw, np.round(raw)):
                raise InvalidArgumentError("labels must be whole numbers")
            low, high = raw.min(), raw.max()
            if low < 0 or high >= self.class_count:
                raise InvalidArgumentError(
                    f"labels in [{low}, {high}] out of range "
                    f"for {self.class_count} classes"
                )
        self.data = np.asarray(raw, dtype=np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx)."""
        return self.data.shape  # type: ignore[return-value]

    def counts(self) -> np.ndarray:
        """Voxel count per class."""
        return np.bincount(self.data.ravel(), minlength=self.class_count)

    def to_two_class(self) -> LabelVolume:
        """Merge every foreground class into a single aorta class."""
        return LabelVolume(
            (self.data != BACKGROUND).astype(np.uint8), self.spacing, class_count=2
        )


@dataclass
class ProbabilityVolume:
    """Channel-major class probabilities.

    Attributes
    ----------
    data : np.ndarray
        Array of shape (class_count, nz, ny, nx).
    spacing : Spacing
        Voxel size in mm.
    """

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.data.ndim != 4 or self.data.shape[0] < 2:
            raise InvalidArgumentError(
                f"probabilities must be (C>=2, nz, ny, nx), got {self.data.shape}"
            )
        self.spacing = _check_grid(self.data.shape[1:], self.spacing)

    @property
    def class_count(self) -> int:
        """Number of classes."""
        return int(self.data.shape[0])

    @property
    def dims(self) -> tuple[int, int, int]:
        """Spatial shape (nz, ny, nx)."""
        return self.data.shape[1:]  # type: ignore[return-value]

    def max_sum_error(self) -> float:
        """Largest deviation of a per-voxel class sum from 1."""
        return float(np.abs(self.data.sum(axis=0, dtype=np.float64) - 1.0).max())
