"""Exception hierarchy shared across the toolkit.

Data errors (bad files, bad shapes, degenerate statistics) are kept separate
from numeric failures (non-finite losses or gradients) so the CLI can map
them to distinct exit codes.
"""


class S5DscrError(Exception):
    """Base class for all toolkit errors."""


class DataError(S5DscrError):
    """Invalid or inconsistent input data (CLI exit code 3)."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(DataError):
    """File format version is not supported by this build."""


class TruncatedFileError(DataError):
    """File ended before the payload announced in the header."""


class HeaderMismatchError(DataError):
    """Header fields contradict each other or the band table."""


class NonFiniteDataError(DataError):
    """Payload contains NaN or Inf values."""


class CorruptFileError(DataError):
    """File content is structurally inconsistent beyond simple truncation."""


class ShapeMismatchError(DataError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateRangeError(DataError):
    """Normalization range collapsed (hi == lo)."""


class DegeneratePCAError(DataError):
    """PCA basis is undefined (zero-variance input)."""


class NumericError(S5DscrError):
    """Non-finite values appeared during optimization (CLI exit code 4)."""
