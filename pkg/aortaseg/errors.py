"""aortaseg: Error types.

Argument and data errors derive from ValueError so that callers catching
ValueError keep working; numerical failures derive from RuntimeError.
"""

from __future__ import annotations

from typing import Any


class InvalidArgumentError(ValueError):
    """An operation received arguments violating its preconditions."""


class InvalidSpecError(ValueError):
    """A network or phantom specification violates its invariants."""


class ConfigError(ValueError):
    """A run configuration contains unknown or invalid settings."""


class CorruptCheckpointError(ValueError):
    """A checkpoint file failed its integrity checks."""


class InvalidCheckpointError(ValueError):
    """A checkpoint is intact but inconsistent with what was expected."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given masks."""


class VolumeParseError(ValueError):
    """A MetaImage header or data file could not be parsed.

    Attributes
    ----------
    key : str
        The header key that caused the failure.
    """

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key: str = key


class NumericalFailureError(RuntimeError):
    """A non-finite value was produced during optimisation."""


class TrainingAbortedError(NumericalFailureError):
    """Training stopped on a non-finite loss.

    Attributes
    ----------
    network : Any
        The last network whose loss was finite.
    log : Any
        The training log up to the failing iteration.
    """

    def __init__(self, message: str, network: Any, log: Any) -> None:
        super().__init__(message)
        self.network = network
        self.log = log
