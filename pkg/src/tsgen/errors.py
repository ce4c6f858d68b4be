"""Exception hierarchy shared across the package.

Every error raised by tsgen derives from TsgenError, and the three
subclasses map one-to-one onto the CLI exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""

from __future__ import annotations


class TsgenError(Exception):
    """Base class for all package errors."""


class UsageError(TsgenError):
    """Bad invocation: unknown flags, malformed config, missing arguments."""

    exit_code = 1


class DataError(TsgenError):
    """Unreadable or structurally invalid input data."""

    exit_code = 2


class NumericError(TsgenError):
    """Numeric failure: degenerate inputs, NaN losses, shape mismatches."""

    exit_code = 3


class ShapeMismatch(NumericError):
    """Array shapes incompatible with the requested operation."""


class TrainingAborted(NumericError):
    """Raised when a training loop hits a non-finite loss.

    Carries the last checkpoint that preceded the failure so callers can
    persist it before exiting.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
