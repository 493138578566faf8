"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class UsageError(Exception):
    """Bad command-line usage or inconsistent arguments."""


class DataError(Exception):
    """Invalid, missing, or corrupt input data or configuration."""


class CheckpointError(DataError):
    """Checkpoint file has a bad magic string, version, or payload."""


class NumericError(Exception):
    """A computation produced non-finite values or failed to make progress."""


class PlanError(NumericError):
    """Planning could not produce a finite-cost hand configuration."""
