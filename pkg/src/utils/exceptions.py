"""
Custom exceptions for tbgdiff
"""


class TBGDiffError(Exception):
    """Base exception for tbgdiff"""

    exit_code = 1


class ConfigurationError(TBGDiffError):
    """Raised when configuration is invalid"""

    exit_code = 2


class ValidationError(TBGDiffError):
    """Raised when arguments to a library call are invalid (shapes, ranges)"""

    exit_code = 2


class SequencingError(TBGDiffError):
    """Raised when guidance is requested before its prerequisite masks exist"""

    exit_code = 2


class DataIngestionError(TBGDiffError):
    """Raised when a dataset directory or image cannot be ingested"""

    exit_code = 3


class CheckpointError(TBGDiffError):
    """Raised when a checkpoint is truncated, corrupt or of another version"""

    exit_code = 3


class NumericalError(TBGDiffError):
    """Raised when training produces a non-finite loss"""

    exit_code = 4
