"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
anything else -> 4.
"""


class AntForgeError(Exception):
    """Base class for all package errors."""


class ConfigError(AntForgeError):
    """Invalid configuration: bad shapes, unknown kinds, malformed configs."""


class DataError(AntForgeError):
    """Dataset ingestion problems: missing files, bad magic, truncation."""


class StateError(AntForgeError):
    """Illegal state transitions, e.g. backward() on a consumed graph."""


class InputError(AntForgeError):
    """Invalid runtime input to an operation (out-of-range label, zero direction)."""


class CheckpointError(AntForgeError):
    """Base class for checkpoint load failures."""


class FingerprintMismatch(CheckpointError):
    """Checkpoint was written for a different architecture."""


class VersionMismatch(CheckpointError):
    """Checkpoint format version is not supported."""


class TruncatedCheckpoint(CheckpointError):
    """Checkpoint file ended before the declared payload."""
