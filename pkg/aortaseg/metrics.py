"""aortaseg: Segmentation metrics.

Dice overlap and Average Symmetric Surface Distance per aorta class, plus a
merged thoracic aorta entry, collected into pandas-backed reports.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import ndimage

from .errors import InvalidArgumentError, UndefinedMetricError
from .utils import format_value, prettify_table_string
from .volume import BACKGROUND, MERGED_NAME, LabelVolume, Spacing, class_names

logger = logging.getLogger("aortaseg:metrics")

# 6-connected neighbourhood
FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)

REPORT_COLUMNS: list[str] = [
    "class",
    "dice",
    "assd_mm",
    "pred_voxels",
    "ref_voxels",
    "dice_defined",
    "assd_defined",
]


@dataclass
class BinaryMask:
    """Boolean voxel mask with its voxel size in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise InvalidArgumentError(f"mask must be 3-D, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)  # type: ignore[assignment]

    @property
    def dims(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx)."""
        return self.data.shape  # type: ignore[return-value]

    @property
    def count(self) -> int:
        """Number of foreground voxels."""
        return int(np.count_nonzero(self.data))


def _check_pair(a: BinaryMask, b: BinaryMask, spacing: bool = False) -> None:
    if a.dims != b.dims:
        raise InvalidArgumentError(f"mask dims differ: {a.dims} vs {b.dims}")
    if spacing and a.spacing != b.spacing:
        raise InvalidArgumentError(f"mask spacings differ: {a.spacing} vs {b.spacing}")


def dice_coefficient(a: BinaryMask, b: BinaryMask) -> float | None:
    """Dice overlap ``2|A∩B| / (|A|+|B|)``; None when both masks are empty."""
    _check_pair(a, b)
    total = a.count + b.count
    if total == 0:
        return None
    overlap = int(np.count_nonzero(a.data & b.data))
    return 2.0 * overlap / total


def surface_mask(mask: BinaryMask) -> np.ndarray:
    """Foreground voxels with a background or out-of-volume face neighbour."""
    interior = ndimage.binary_erosion(
        mask.data, structure=FACE_NEIGHBOURS, border_value=0
    )
    return mask.data & ~interior


def surface_voxels(mask: BinaryMask) -> np.ndarray:
    """Coordinates (k, 3) in (z, y, x) order of the surface voxels of a mask."""
    return np.argwhere(surface_mask(mask))


def assd(a: BinaryMask, b: BinaryMask) -> float:
    """Average Symmetric Surface Distance in mm.

    Distances run between voxel centres in physical coordinates. Both
    directed distance sums are pooled and divided by the total number of
    surface voxels.

    Parameters
    ----------
    a : BinaryMask
        First mask.
    b : BinaryMask
        Second mask, on the same grid.

    Returns
    -------
    float
        The symmetric surface distance.

    Raises
    ------
    UndefinedMetricError
        If either mask is empty.
    """
    _check_pair(a, b, spacing=True)
    if a.count == 0 or b.count == 0:
        raise UndefinedMetricError("ASSD is undefined for an empty mask")
    surface_a = surface_mask(a)
    surface_b = surface_mask(b)
    to_b = ndimage.distance_transform_edt(~surface_b, sampling=b.spacing)
    to_a = ndimage.distance_transform_edt(~surface_a, sampling=a.spacing)
    total = float(to_b[surface_a].sum()) + float(to_a[surface_b].sum())
    return total / (np.count_nonzero(surface_a) + np.count_nonzero(surface_b))


def class_mask(labels: LabelVolume, cls: int) -> BinaryMask:
    """Mask of a single class."""
    return BinaryMask(labels.data == cls, labels.spacing)


def merge_foreground(labels: LabelVolume) -> BinaryMask:
    """Union of all aorta classes."""
    return BinaryMask(labels.data != BACKGROUND, labels.spacing)


def _entry(name: str, pred: BinaryMask, ref: BinaryMask) -> dict:
    dice = dice_coefficient(pred, ref)
    try:
        distance: float | None = assd(pred, ref)
    except UndefinedMetricError:
        distance = None
    return {
        "class": name,
        "dice": np.nan if dice is None else dice,
        "assd_mm": np.nan if distance is None else distance,
        "pred_voxels": pred.count,
        "ref_voxels": ref.count,
        "dice_defined": dice is not None,
        "assd_defined": distance is not None,
    }


@dataclass
class MetricsReport:
    """Per-class evaluation of one segmentation.

    Attributes
    ----------
    frame : pd.DataFrame
        One row per aorta class followed by the merged thoracic aorta row;
        undefined values are NaN with the matching flag set to False.
    spacing : Spacing
        Voxel size at which the evaluation ran.
    """

    frame: pd.DataFrame
    spacing: Spacing

    def _value(self, name: str, column: str) -> float | None:
        rows = self.frame[self.frame["class"] == name]
        if rows.empty:
            raise InvalidArgumentError(f"no class {name} in report")
        row = rows.iloc[0]
        flag = "dice_defined" if column == "dice" else "assd_defined"
        return float(row[column]) if bool(row[flag]) else None

    def dice(self, name: str) -> float | None:
        """Dice of a class by name, None where undefined."""
        return self._value(name, "dice")

    def assd(self, name: str) -> float | None:
        """ASSD of a class by name, None where undefined."""
        return self._value(name, "assd_mm")

    @property
    def classes(self) -> list[str]:
        """Class names in report order."""
        return list(self.frame["class"])

    def to_text(self) -> str:
        """Plain text report, one ``<class> dice=.. assd_mm=..`` line per class."""
        spacing = " x ".join(f"{s:g}" for s in self.spacing)
        lines = [f"# evaluated at native resolution, spacing {spacing} mm (z x y x x)"]
        for name in self.classes:
            lines.append(
                f"{name} dice={format_value(self.dice(name))} "
                f"assd_mm={format_value(self.assd(name))}"
            )
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        return prettify_table_string(self.frame.set_index("class"))


def evaluate(pred: LabelVolume, ref: LabelVolume) -> MetricsReport:
    """Compare a predicted labelling with a reference.

    A two-class volume compared with a four-class one is evaluated after
    merging the four-class volume's aorta classes.

    Parameters
    ----------
    pred : LabelVolume
        Predicted labels.
    ref : LabelVolume
        Reference labels on the same grid.

    Returns
    -------
    MetricsReport
        Per-class and merged Dice and ASSD.
    """
    if pred.dims != ref.dims:
        raise InvalidArgumentError(f"volume dims differ: {pred.dims} vs {ref.dims}")
    if tuple(pred.spacing) != tuple(ref.spacing):
        raise InvalidArgumentError(f"spacings differ: {pred.spacing} vs {ref.spacing}")
    if pred.class_count != ref.class_count:
        if min(pred.class_count, ref.class_count) != 2:
            raise InvalidArgumentError(
                f"class counts differ: {pred.class_count} vs {ref.class_count}"
            )
        pred, ref = pred.to_two_class(), ref.to_two_class()
    logger.debug("evaluate(): %d classes on %s", ref.class_count, ref.dims)
    names = class_names(ref.class_count)
    rows = []
    if ref.class_count > 2:
        for cls in range(1, ref.class_count):
            rows.append(_entry(names[cls], class_mask(pred, cls), class_mask(ref, cls)))
    rows.append(_entry(MERGED_NAME, merge_foreground(pred), merge_foreground(ref)))
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return MetricsReport(frame, ref.spacing)


def summarise_reports(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    """Mean and standard deviation per class over several scans.

    Undefined entries are skipped; ``n_dice`` and ``n_assd`` count the
    defined values that entered each statistic.
    """
    if not reports:
        raise InvalidArgumentError("no reports to summarise")
    frame = pd.concat([r.frame for r in reports], ignore_index=True)
    order = list(dict.fromkeys(frame["class"]))
    grouped = frame.groupby("class", sort=False)
    summary = pd.DataFrame(
        {
            "dice_mean": grouped["dice"].mean(),
            "dice_std": grouped["dice"].std(),
            "assd_mean": grouped["assd_mm"].mean(),
            "assd_std": grouped["assd_mm"].std(),
            "n_dice": grouped["dice"].count(),
            "n_assd": grouped["assd_mm"].count(),
        }
    )
    return summary.loc[order]
