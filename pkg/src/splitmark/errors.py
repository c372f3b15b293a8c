"""Exception hierarchy shared by every splitmark module."""


class SplitmarkError(Exception):
    """Base class for all library errors."""


class ConfigError(SplitmarkError, ValueError):
    """Invalid configuration value or argument (CLI exit code 2)."""


class ShapeError(SplitmarkError, ValueError):
    """Incompatible tensor or layer shapes."""


class NumericError(SplitmarkError, ArithmeticError):
    """Non-finite values entered or left a public operation."""


class StateError(SplitmarkError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DataError(SplitmarkError, ValueError):
    """Labels or samples violate a dataset contract."""


class AggregationError(SplitmarkError, ValueError):
    """Models handed to FedAvg do not share an architecture."""


class VerificationError(SplitmarkError, RuntimeError):
    """Ownership verification could not be carried out."""


class FormatError(SplitmarkError, ValueError):
    """A binary file is truncated, corrupt or has the wrong magic."""


class UnsupportedVersionError(FormatError):
    """A binary file carries a format version this build cannot read."""
