"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (usage 2, data 3, numeric 4), so every
module raises one of the classes below instead of bare ValueError/OSError
when the problem is user-facing.
"""


class FpiError(Exception):
    """Base class for all package errors."""


class UsageError(FpiError):
    """Bad flags, malformed config, invalid argument combinations."""


class DataError(FpiError):
    """Missing/inconsistent files, shape mismatches, bad manifests."""


class NumericError(FpiError):
    """Non-finite values where finite ones are required (loss, activations)."""
