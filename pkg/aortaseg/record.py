"""aortaseg: Training log storage and serialization."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass

import pandas as pd
from pandas import DataFrame

from .version import __version__

logger = logging.getLogger("aortaseg:records")

LINE_PATTERN = re.compile(
    r"^iter=(?P<iteration>\d+) loss=(?P<loss>\S+)(?: val_dice=(?P<val_dice>\S+))?$"
)


@dataclass
class TrainingRecord:
    """One line of the training log.

    Attributes
    ----------
    iteration : int
        Iteration number, starting at 1.
    loss : float
        Mini-batch soft Dice loss.
    val_dice : float | None
        Mean foreground validation Dice, when validation ran.
    """

    iteration: int
    loss: float
    val_dice: float | None = None

    def __str__(self) -> str:
        line = f"iter={self.iteration} loss={self.loss:.6f}"
        if self.val_dice is not None:
            line += f" val_dice={self.val_dice:.6f}"
        return line


class TrainingLog:
    """Ordered collection of training records."""

    def __init__(self) -> None:
        """Construct an empty log."""
        self.records: list[TrainingRecord] = []
        self.written: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def add(self, iteration: int, loss: float, val_dice: float | None = None) -> None:
        """Append a record.

        Parameters
        ----------
        iteration : int
            Iteration number.
        loss : float
            Training loss at that iteration.
        val_dice : float | None, default None
            Validation score, if measured.
        """
        record = TrainingRecord(iteration, float(loss), val_dice)
        self.records.append(record)
        if val_dice is not None:
            logger.info("%s", record)
        else:
            logger.debug("%s", record)

    @property
    def losses(self) -> list[float]:
        """Training loss of every record in order."""
        return [record.loss for record in self.records]

    def validations(self) -> list[TrainingRecord]:
        """Records that carry a validation score."""
        return [record for record in self.records if record.val_dice is not None]

    def best(self) -> TrainingRecord | None:
        """First record with the highest validation score."""
        scored = self.validations()
        if not scored:
            return None
        return max(scored, key=lambda r: r.val_dice or 0.0)

    def to_text(self) -> str:
        """Return the log as text, one record per line."""
        return "".join(f"{record}\n" for record in self.records)

    def to_dataframe(self) -> DataFrame:
        """Return the log as a DataFrame indexed by iteration."""
        frame = pd.DataFrame(
            {
                "iteration": [r.iteration for r in self.records],
                "loss": self.losses,
                "val_dice": [r.val_dice for r in self.records],
            }
        )
        return frame.set_index("iteration")

    def write(self, path: str) -> None:
        """Append the records not yet written to a text file.

        Parameters
        ----------
        path : str
            Log file name.
        """
        pending = self.records[self.written :]
        with open(path, "a", encoding="utf-8") as handle:
            handle.writelines(f"{record}\n" for record in pending)
        self.written = len(self.records)
        logger.debug("write(): %d records appended to %s", len(pending), path)

    def summary(self, **extra: object) -> dict:
        """Return a JSON-serialisable summary of the run."""
        best = self.best()
        return {
            "version": __version__,
            "iterations": self.records[-1].iteration if self.records else 0,
            "final_loss": self.records[-1].loss if self.records else None,
            "best_iteration": best.iteration if best else None,
            "best_val_dice": best.val_dice if best else None,
            **extra,
        }

    def write_summary(self, path: str, **extra: object) -> None:
        """Write ``training.json`` and checksums into an output folder.

        Parameters
        ----------
        path : str
            Name of a folder to save outputs.
        **extra : object
            Additional JSON-serialisable fields.
        """
        os.makedirs(path, exist_ok=True)
        filename = os.path.normpath(f"{path}/training.json")
        with open(filename, "w", newline="", encoding="utf-8") as handle:
            json.dump(self.summary(**extra), handle, indent=4, sort_keys=False)
        write_checksums(path)
        logger.info("training summary written to: %s", path)


def load_log(path: str) -> TrainingLog:
    """Load a training log written by :meth:`TrainingLog.write`.

    Parameters
    ----------
    path : str
        Log file name.

    Returns
    -------
    TrainingLog
        The loaded log, marked as fully written.
    """
    log = TrainingLog()
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            match = LINE_PATTERN.match(line)
            if match is None:
                raise ValueError(f"{path}:{number}: malformed log line {line!r}")
            val_dice = match.group("val_dice")
            log.records.append(
                TrainingRecord(
                    int(match.group("iteration")),
                    float(match.group("loss")),
                    None if val_dice is None else float(val_dice),
                )
            )
    log.written = len(log.records)
    return log


def write_checksums(path: str) -> None:
    """Write checksums for each file to checksums folder.

    Parameters
    ----------
    path : str
        Name of a folder containing outputs.
    """
    if not os.path.exists(path):
        logger.debug("There is no file to do the checksums")  # pragma: no cover
        return
    checksums: dict[str, str] = {}
    for name in sorted(os.listdir(path)):
        filename = os.path.join(path, name)
        if os.path.isfile(filename):
            with open(filename, "rb") as file:
                checksums[name] = hashlib.sha256(file.read()).hexdigest()
    checksums_dir: str = os.path.normpath(f"{path}/checksums")
    os.makedirs(checksums_dir, exist_ok=True)
    for name, sha256 in checksums.items():
        filename = os.path.join(checksums_dir, name + ".txt")
        with open(filename, "w", encoding="utf-8") as file:
            file.write(sha256)
