"""Exception hierarchy shared by the whole package.

The CLI maps these onto process exit codes: usage problems exit 1,
ConfigError/DataError/ContractViolation exit 2, NumericError exit 3.
"""


class TaskPyramidError(Exception):
    """Base class for all package errors."""


class ContractViolation(TaskPyramidError):
    """An operation was called with arguments that break its contract."""


class DataError(TaskPyramidError):
    """Malformed or inconsistent data (files, rasters, targets)."""


class ConfigError(TaskPyramidError):
    """Invalid or unknown configuration keys/values."""


class NumericError(TaskPyramidError):
    """Non-finite values where finite ones are required."""
