"""Exception hierarchy for csilab."""

from __future__ import annotations

from typing import Any, List, Optional


class CsiLabError(Exception):
    """Base class for every error raised by csilab."""


class ShapeError(CsiLabError, ValueError):
    """Tensor or array shapes are inconsistent with an operation."""


class ConfigError(CsiLabError, ValueError):
    """An experiment, model, channel or training setting is invalid."""


class NonFiniteError(CsiLabError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class StorageError(CsiLabError):
    """A dataset, checkpoint or report file cannot be read or written."""


class MagicMismatchError(StorageError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(StorageError):
    """The file was written with an unsupported format version."""


class TruncatedFileError(StorageError):
    """The file ends before all declared records were read."""


class ShapeInconsistencyError(StorageError):
    """Records in a file (or samples to be written) disagree on shape."""


class TrainingDivergedError(CsiLabError):
    """Training produced a non-finite loss.

    Carries the parameters of the last completed epoch and the history so far
    so callers can persist them.
    """

    def __init__(
        self,
        message: str,
        last_good: Optional[Any] = None,
        history: Optional[List[Any]] = None,
    ):
        super().__init__(message)
        self.last_good = last_good
        self.history = history or []
