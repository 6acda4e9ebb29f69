"""Tests for training log storage."""

import json
import os

import pytest

from aortaseg.record import TrainingLog, load_log

# pylint: disable=redefined-outer-name


@pytest.fixture
def log() -> TrainingLog:
    """Log with two validation points."""
    log = TrainingLog()
    log.add(1, 0.9)
    log.add(2, 0.8, 0.5)
    log.add(3, 0.7)
    log.add(4, 0.6, 0.75)
    log.add(5, 0.55, 0.75)
    return log


def test_record_text(log):
    """Records print one per line, scores only where validated."""
    lines = log.to_text().splitlines()
    assert lines[0] == "iter=1 loss=0.900000"
    assert lines[1] == "iter=2 loss=0.800000 val_dice=0.500000"
    assert len(log) == 5
    assert log.records[2].iteration == 3


def test_best_is_first_maximum(log):
    """Ties keep the earliest iteration."""
    assert log.best().iteration == 4
    assert [r.iteration for r in log.validations()] == [2, 4, 5]
    assert TrainingLog().best() is None


def test_dataframe(log):
    """The DataFrame is indexed by iteration."""
    frame = log.to_dataframe()
    assert list(frame.index) == [1, 2, 3, 4, 5]
    assert frame.loc[3, "loss"] == pytest.approx(0.7)
    assert frame["val_dice"].isna().sum() == 2


def test_write_appends_and_loads(log, tmp_path):
    """Writes append only new records; loading restores them."""
    path = str(tmp_path / "train.log")
    log.write(path)
    log.add(6, 0.5)
    log.write(path)
    loaded = load_log(path)
    assert len(loaded) == 6
    assert loaded.written == 6
    assert loaded.records[1].val_dice == pytest.approx(0.5)
    assert loaded.records[5].val_dice is None
    assert loaded.to_text() == log.to_text()


def test_load_rejects_malformed(tmp_path):
    """Lines that are not records are reported with their number."""
    path = tmp_path / "bad.log"
    path.write_text("iter=1 loss=0.5\nloss=0.4\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":2:"):
        load_log(str(path))


def test_write_summary(log, tmp_path):
    """The summary names the best iteration and is checksummed."""
    path = str(tmp_path / "outputs")
    log.write_summary(path, seed=3)
    with open(os.path.join(path, "training.json"), encoding="utf-8") as handle:
        summary = json.load(handle)
    assert summary["iterations"] == 5
    assert summary["best_iteration"] == 4
    assert summary["best_val_dice"] == 0.75
    assert summary["seed"] == 3
    assert os.path.exists(os.path.join(path, "checksums", "training.json.txt"))
