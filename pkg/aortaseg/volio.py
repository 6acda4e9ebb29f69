"""aortaseg: MetaImage volume input and output.

Headers list ``DimSize`` and ``ElementSpacing`` x first; arrays are held
z-major, so both are reversed on the way in and out. Data are written
little-endian, either beside the header (``.mhd`` + ``.raw``) or appended to
it (``.mha`` with ``ElementDataFile = LOCAL``).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VolumeParseError
from .phantom import Phantom
from .record import write_checksums
from .version import __version__
from .volume import (
    IntensityUnit,
    LabelVolume,
    ProbabilityVolume,
    Spacing,
    Volume,
    class_names,
)

logger = logging.getLogger("aortaseg:volio")

ELEMENT_TYPES: dict[str, np.dtype] = {
    "MET_SHORT": np.dtype(np.int16),
    "MET_UCHAR": np.dtype(np.uint8),
    "MET_FLOAT": np.dtype(np.float32),
}
REQUIRED_KEYS: tuple[str, ...] = ("NDims", "DimSize", "ElementType", "ElementDataFile")
BYTE_ORDER_KEYS: tuple[str, ...] = ("BinaryDataByteOrderMSB", "ElementByteOrderMSB")
CLASS_COUNT_KEY: str = "AortaClassCount"
UNIT_KEY: str = "AortaIntensityUnit"
LOCAL: str = "LOCAL"
MANIFEST: str = "dataset.json"


@dataclass
class VolumeHeader:
    """Parsed MetaImage header.

    Attributes
    ----------
    dims : tuple[int, int, int]
        Array shape (nz, ny, nx).
    spacing : Spacing
        Voxel size (sz, sy, sx) in mm.
    element_type : str
        ``MET_SHORT``, ``MET_UCHAR`` or ``MET_FLOAT``.
    big_endian : bool
        Byte order of the data.
    data_file : str
        Data file name relative to the header, or ``LOCAL``.
    extra : dict[str, str]
        Other header entries.
    """

    dims: tuple[int, int, int]
    spacing: Spacing
    element_type: str
    big_endian: bool = False
    data_file: str = LOCAL
    extra: dict[str, str] = field(default_factory=dict)

    @property
    def dtype(self) -> np.dtype:
        """Element dtype in the file byte order."""
        order = ">" if self.big_endian else "<"
        return ELEMENT_TYPES[self.element_type].newbyteorder(order)

    @property
    def expected_bytes(self) -> int:
        """Size of the data block implied by the header."""
        return int(np.prod(self.dims)) * ELEMENT_TYPES[self.element_type].itemsize


def _parse_bool(key: str, value: str) -> bool:
    if value.lower() in ("true", "1"):
        return True
    if value.lower() in ("false", "0"):
        return False
    raise VolumeParseError(key, f"expected True or False, got {value!r}")


def _numbers(key: str, value: str, kind: type, count: int) -> list:
    try:
        numbers = [kind(token) for token in value.split()]
    except ValueError as err:
        raise VolumeParseError(key, f"cannot parse {value!r}") from err
    if len(numbers) != count:
        raise VolumeParseError(key, f"expected {count} values, got {len(numbers)}")
    return numbers


def parse_header(entries: dict[str, str]) -> VolumeHeader:
    """Build a header from ``key = value`` entries.

    Raises
    ------
    VolumeParseError
        Naming the missing, unsupported or malformed key.
    """
    for key in REQUIRED_KEYS:
        if key not in entries:
            raise VolumeParseError(key, "required key missing")
    if entries["NDims"].strip() != "3":
        raise VolumeParseError(
            "NDims", f"only 3-D volumes are supported, got {entries['NDims']}"
        )
    if _parse_bool("CompressedData", entries.get("CompressedData", "False")):
        raise VolumeParseError("CompressedData", "compressed data is not supported")
    element_type = entries["ElementType"].strip()
    if element_type not in ELEMENT_TYPES:
        raise VolumeParseError(
            "ElementType", f"unsupported element type {element_type}"
        )
    sizes = _numbers("DimSize", entries["DimSize"], int, 3)
    if min(sizes) < 1:
        raise VolumeParseError("DimSize", f"sizes must be positive, got {sizes}")
    spacing_text = entries.get("ElementSpacing", "1 1 1")
    spacing = _numbers("ElementSpacing", spacing_text, float, 3)
    if min(spacing) <= 0:
        raise VolumeParseError(
            "ElementSpacing", f"spacing must be positive, got {spacing}"
        )
    big_endian = False
    for key in BYTE_ORDER_KEYS:
        if key in entries:
            big_endian = _parse_bool(key, entries[key])
    known = {*REQUIRED_KEYS, *BYTE_ORDER_KEYS, "ElementSpacing", "CompressedData"}
    return VolumeHeader(
        dims=tuple(sizes[::-1]),  # type: ignore[arg-type]
        spacing=tuple(spacing[::-1]),  # type: ignore[arg-type]
        element_type=element_type,
        big_endian=big_endian,
        data_file=entries["ElementDataFile"].strip(),
        extra={k: v for k, v in entries.items() if k not in known},
    )


def _split_header(content: bytes) -> tuple[dict[str, str], int]:
    """Header entries and the offset of the byte following the header."""
    entries: dict[str, str] = {}
    offset = 0
    while offset < len(content):
        end = content.find(b"\n", offset)
        end = len(content) if end < 0 else end
        line = content[offset:end].decode("ascii", errors="replace").strip()
        offset = end + 1
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeParseError(line.split()[0], f"malformed header line {line!r}")
        entries[key.strip()] = value.strip()
        if key.strip() == "ElementDataFile":
            break
    return entries, min(offset, len(content))


def read_header(path: str | Path) -> tuple[VolumeHeader, bytes]:
    """Parse a header file and load its data block.

    Returns
    -------
    tuple[VolumeHeader, bytes]
        Header and raw data bytes.
    """
    path = Path(path)
    content = path.read_bytes()
    entries, offset = _split_header(content)
    header = parse_header(entries)
    if header.data_file == LOCAL:
        data = content[offset:]
    else:
        data = (path.parent / header.data_file).read_bytes()
    if len(data) != header.expected_bytes:
        raise VolumeParseError(
            "DimSize",
            f"{path}: header implies {header.expected_bytes} bytes, "
            f"data holds {len(data)}",
        )
    return header, data


def read_volume(path: str | Path) -> Volume | LabelVolume:
    """Read a MetaImage volume.

    ``MET_SHORT`` data are Hounsfield intensities, ``MET_UCHAR`` data are
    labels and ``MET_FLOAT`` data are scalar volumes whose unit is stored in
    the header (normalised when absent).

    Parameters
    ----------
    path : str | Path
        ``.mhd`` or ``.mha`` header.

    Returns
    -------
    Volume | LabelVolume
        The loaded volume.
    """
    logger.debug("read_volume(): %s", path)
    header, raw = read_header(path)
    data = np.frombuffer(raw, dtype=header.dtype).reshape(header.dims)
    data = data.astype(ELEMENT_TYPES[header.element_type])
    if header.element_type == "MET_UCHAR":
        default = 4 if (data.size == 0 or int(data.max()) < 4) else int(data.max()) + 1
        try:
            count = int(header.extra.get(CLASS_COUNT_KEY, default))
        except ValueError as err:
            raise VolumeParseError(
                CLASS_COUNT_KEY, "class count must be an integer"
            ) from err
        try:
            return LabelVolume(data, header.spacing, class_count=count)
        except ValueError as err:
            raise VolumeParseError(CLASS_COUNT_KEY, str(err)) from err
    if header.element_type == "MET_SHORT":
        return Volume(data, header.spacing, IntensityUnit.HOUNSFIELD)
    try:
        unit = IntensityUnit(header.extra.get(UNIT_KEY, IntensityUnit.NORMALIZED.value))
    except ValueError as err:
        raise VolumeParseError(
            UNIT_KEY, f"unknown unit {header.extra[UNIT_KEY]}"
        ) from err
    return Volume(data, header.spacing, unit)


def _element(volume: Volume | LabelVolume) -> tuple[str, np.ndarray, dict[str, str]]:
    if isinstance(volume, LabelVolume):
        return "MET_UCHAR", volume.data, {CLASS_COUNT_KEY: str(volume.class_count)}
    data = volume.data
    if np.issubdtype(data.dtype, np.integer):
        if data.size and (data.min() < -32768 or data.max() > 32767):
            raise ValueError("integer intensities exceed the 16-bit range")
        return "MET_SHORT", data.astype(np.int16), {}
    return "MET_FLOAT", data.astype(np.float32), {UNIT_KEY: volume.unit.value}


def header_text(
    dims: Sequence[int],
    spacing: Spacing,
    element_type: str,
    data_file: str,
    extra: dict,
) -> str:
    """MetaImage header with a fixed key order."""
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "ElementSpacing = " + " ".join(repr(float(s)) for s in spacing[::-1]),
        "DimSize = " + " ".join(str(int(n)) for n in dims[::-1]),
        f"ElementType = {element_type}",
        *(f"{key} = {value}" for key, value in extra.items()),
        f"ElementDataFile = {data_file}",
    ]
    return "\n".join(lines) + "\n"


def write_volume(volume: Volume | LabelVolume, path: str | Path) -> None:
    """Write a volume as ``.mhd`` + ``.raw`` or as a single ``.mha`` file.

    Output bytes depend only on the volume.
    """
    path = Path(path)
    element_type, data, extra = _element(volume)
    payload = np.ascontiguousarray(data).astype(data.dtype.newbyteorder("<")).tobytes()
    local = path.suffix.lower() == ".mha"
    raw_path = path.with_suffix(".raw")
    data_file = LOCAL if local else raw_path.name
    text = header_text(volume.dims, volume.spacing, element_type, data_file, extra)
    try:
        if local:
            path.write_bytes(text.encode("ascii") + payload)
        else:
            path.write_text(text, encoding="ascii", newline="\n")
            raw_path.write_bytes(payload)
    except OSError as err:
        raise OSError(f"cannot write volume {path}: {err}") from err
    logger.debug("write_volume(): %s %s", path, element_type)


def write_probabilities(
    probabilities: ProbabilityVolume, directory: str | Path
) -> list[Path]:
    """Write one ``MET_FLOAT`` volume per class into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    names = class_names(probabilities.class_count)
    for name, channel in zip(names, probabilities.data):
        path = directory / f"prob_{name}.mhd"
        volume = Volume(channel, probabilities.spacing, IntensityUnit.NORMALIZED)
        write_volume(volume, path)
        written.append(path)
    logger.info("probabilities written to: %s", directory)
    return written


def write_dataset(phantoms: Sequence[Phantom], directory: str | Path) -> None:
    """Write phantoms with a ``dataset.json`` manifest and checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cases = []
    for index, phantom in enumerate(phantoms):
        image = f"case_{index:03d}_image.mhd"
        labels = f"case_{index:03d}_labels.mhd"
        write_volume(phantom.volume, directory / image)
        write_volume(phantom.labels, directory / labels)
        cases.append(
            {
                "image": image,
                "labels": labels,
                "voxels": phantom.labels.counts().tolist(),
                "spec": dataclasses.asdict(phantom.spec),
            }
        )
    manifest = {"version": __version__, "cases": cases}
    with open(directory / MANIFEST, "w", newline="", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=4, sort_keys=False)
    write_checksums(os.fspath(directory))
    logger.info("%d phantoms written to: %s", len(phantoms), directory)


def read_dataset(directory: str | Path) -> list[tuple[Volume, LabelVolume]]:
    """Read the (volume, labels) pairs listed in a ``dataset.json`` manifest."""
    directory = Path(directory)
    with open(directory / MANIFEST, encoding="utf-8") as handle:
        manifest = json.load(handle)
    pairs = []
    for case in manifest["cases"]:
        volume = read_volume(directory / case["image"])
        labels = read_volume(directory / case["labels"])
        if not isinstance(labels, LabelVolume) or isinstance(volume, LabelVolume):
            raise VolumeParseError("ElementType", f"unexpected element types in {case}")
        pairs.append((volume, labels))
    logger.info("%d cases read from: %s", len(pairs), directory)
    return pairs
