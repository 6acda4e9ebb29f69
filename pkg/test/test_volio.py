"""Tests for MetaImage input and output."""

import json

import numpy as np
import pytest

from aortaseg import volio
from aortaseg.errors import InvalidArgumentError, VolumeParseError
from aortaseg.phantom import PhantomSpec, make_dataset
from aortaseg.volume import IntensityUnit, LabelVolume, ProbabilityVolume, Volume

# pylint: disable=redefined-outer-name

HEADER = (
    "NDims = 3\n"
    "DimSize = 4 4 4\n"
    "ElementSpacing = 1 1 1\n"
    "ElementType = MET_SHORT\n"
    "ElementDataFile = v.raw\n"
)


@pytest.fixture
def header_file(tmp_path):
    """Minimal hand-written header with its raw file."""
    data = np.arange(64, dtype="<i2")
    (tmp_path / "v.raw").write_bytes(data.tobytes())
    path = tmp_path / "v.mhd"
    path.write_text(HEADER, encoding="ascii")
    return path


def test_read_minimal_header(header_file):
    """A 128 byte raw file gives a 4x4x4 Hounsfield volume."""
    volume = volio.read_volume(header_file)
    assert isinstance(volume, Volume)
    assert volume.dims == (4, 4, 4)
    assert volume.data.dtype == np.int16
    assert volume.unit is IntensityUnit.HOUNSFIELD
    assert volume.data[0, 0, 3] == 3
    assert volume.data[1, 0, 0] == 16


def test_size_mismatch(header_file):
    """A raw file of the wrong size names DimSize."""
    (header_file.parent / "v.raw").write_bytes(bytes(100))
    with pytest.raises(VolumeParseError) as err:
        volio.read_volume(header_file)
    assert err.value.key == "DimSize"


@pytest.mark.parametrize(
    ("line", "replacement", "key"),
    [
        ("ElementType = MET_SHORT\n", "", "ElementType"),
        ("ElementType = MET_SHORT\n", "ElementType = MET_DOUBLE\n", "ElementType"),
        ("DimSize = 4 4 4\n", "", "DimSize"),
        ("DimSize = 4 4 4\n", "DimSize = 4 4\n", "DimSize"),
        ("NDims = 3\n", "NDims = 2\n", "NDims"),
    ],
)
def test_header_errors(header_file, line, replacement, key):
    """Missing and unsupported keys are named in the error."""
    header_file.write_text(HEADER.replace(line, replacement), encoding="ascii")
    with pytest.raises(VolumeParseError) as err:
        volio.read_volume(header_file)
    assert err.value.key == key


def test_big_endian_data(tmp_path):
    """Byte order flags are honoured on input."""
    data = np.arange(8, dtype=">i2")
    (tmp_path / "b.raw").write_bytes(data.tobytes())
    text = HEADER.replace("4 4 4", "2 2 2").replace("v.raw", "b.raw")
    # the header ends at ElementDataFile
    header = "ElementByteOrderMSB = True\n" + text
    (tmp_path / "b.mhd").write_text(header, encoding="ascii")
    volume = volio.read_volume(tmp_path / "b.mhd")
    np.testing.assert_array_equal(volume.data.ravel(), np.arange(8))


@pytest.mark.parametrize("suffix", [".mhd", ".mha"])
def test_round_trips(tmp_path, suffix):
    """All three element types survive a write and read bit-exactly."""
    rng = np.random.default_rng(0)
    spacing = (2.5, 0.7, 0.7)
    volumes = [
        Volume(rng.integers(-1024, 3071, size=(3, 4, 5)).astype(np.int16), spacing),
        LabelVolume(rng.integers(0, 4, size=(3, 4, 5)).astype(np.uint8), spacing),
        LabelVolume(
            rng.integers(0, 2, size=(3, 4, 5)).astype(np.uint8), spacing, class_count=2
        ),
        Volume(
            rng.random((3, 4, 5), dtype=np.float32), spacing, IntensityUnit.NORMALIZED
        ),
    ]
    for index, volume in enumerate(volumes):
        path = tmp_path / f"v{index}{suffix}"
        volio.write_volume(volume, path)
        loaded = volio.read_volume(path)
        assert type(loaded) is type(volume)
        assert loaded.spacing == spacing
        assert loaded.data.dtype == volume.data.dtype
        np.testing.assert_array_equal(loaded.data, volume.data)
        if isinstance(volume, LabelVolume):
            assert loaded.class_count == volume.class_count
        else:
            assert loaded.unit is volume.unit


def test_header_layout(tmp_path):
    """Labels are MET_UCHAR and spacing is written x first at full precision."""
    labels = LabelVolume(np.zeros((2, 3, 4), dtype=np.uint8), (2.5, 0.7, 0.7))
    volio.write_volume(labels, tmp_path / "l.mhd")
    text = (tmp_path / "l.mhd").read_text(encoding="ascii")
    assert "ElementType = MET_UCHAR\n" in text
    assert "ElementSpacing = 0.7 0.7 2.5\n" in text
    assert "DimSize = 4 3 2\n" in text
    assert text.endswith("ElementDataFile = l.raw\n")
    assert (tmp_path / "l.raw").stat().st_size == 24


def test_writes_are_byte_identical(tmp_path):
    """Writing the same volume twice gives identical files."""
    data = np.random.default_rng(1).random((3, 3, 3)).astype(np.float32)
    volume = Volume(data, (1.0, 1.0, 1.0))
    volio.write_volume(volume, tmp_path / "a.mha")
    volio.write_volume(volume, tmp_path / "b.mha")
    assert (tmp_path / "a.mha").read_bytes() == (tmp_path / "b.mha").read_bytes()


def test_write_probabilities(tmp_path):
    """One float volume per class is written with the class name."""
    data = np.full((2, 2, 3, 4), 0.5, dtype=np.float32)
    paths = volio.write_probabilities(ProbabilityVolume(data), tmp_path / "probs")
    assert [p.name for p in paths] == ["prob_background.mhd", "prob_thoracic_aorta.mhd"]
    loaded = volio.read_volume(paths[1])
    assert loaded.unit is IntensityUnit.NORMALIZED
    np.testing.assert_array_equal(loaded.data, data[1])


def test_dataset_round_trip(tmp_path):
    """Phantom datasets are written with a manifest and checksums."""
    spec = PhantomSpec(
        shape=(48, 36, 44),
        tube_radius=4.0,
        arch_center=(22.0, 18.0, 26.0),
        arch_radius=12.0,
        root_z=12.0,
        bottom_z=4.0,
        blob_count=1,
    )
    phantoms = make_dataset(2, spec, seed=3)
    volio.write_dataset(phantoms, tmp_path)
    assert (tmp_path / volio.MANIFEST).exists()
    assert (tmp_path / "checksums" / "case_001_labels.raw.txt").exists()
    manifest = json.loads((tmp_path / volio.MANIFEST).read_text(encoding="utf-8"))
    for case, phantom in zip(manifest["cases"], phantoms):
        assert sum(case["voxels"]) == phantom.labels.data.size
        assert case["voxels"][2] == np.count_nonzero(phantom.labels.data == 2)
    pairs = volio.read_dataset(tmp_path)
    assert len(pairs) == 2
    for (volume, labels), phantom in zip(pairs, phantoms):
        np.testing.assert_array_equal(volume.data, phantom.volume.data)
        np.testing.assert_array_equal(labels.data, phantom.labels.data)


@pytest.mark.parametrize(
    "values",
    [
        np.array([0, 1, 256], dtype=np.int16),
        np.array([0, -1, 2], dtype=np.int16),
        np.array([0, 4, 1], dtype=np.int16),
        np.array([0.0, 1.5, 2.0]),
    ],
)
def test_label_range_checked_before_cast(values):
    """Labels that would wrap or truncate in uint8 are rejected."""
    with pytest.raises(InvalidArgumentError):
        LabelVolume(values.reshape(1, 1, 3), class_count=4)


def test_label_whole_floats_accepted():
    """Integral float labels are stored as uint8."""
    labels = LabelVolume(np.array([[[0.0, 3.0, 1.0]]]), class_count=4)
    assert labels.data.dtype == np.uint8
    np.testing.assert_array_equal(labels.data.ravel(), [0, 3, 1])
