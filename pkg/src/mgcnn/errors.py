"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes, so keep the hierarchy
flat and the intent of each class narrow.
"""


class MgcnnError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MgcnnError, ValueError):
    """A grid or array shape violates an operation's requirements."""


class IllPosedError(MgcnnError, ValueError):
    """A coarsening map is singular or too badly conditioned to invert."""


class DivergenceError(MgcnnError, FloatingPointError):
    """A state or gradient became non-finite; the message names where."""


class ConfigError(MgcnnError, ValueError):
    """A run configuration contains unknown keys or invalid values."""


class DataFormatError(MgcnnError, ValueError):
    """A binary input (IDX file or model container) is malformed."""


class BadMagicError(DataFormatError):
    """Header magic does not match the expected format."""


class TruncatedFileError(DataFormatError):
    """A file ends before its declared payload does."""


class CountMismatchError(DataFormatError):
    """Image and label files disagree about the number of examples."""


class VersionMismatchError(DataFormatError):
    """A model container was written by an unsupported format version."""
