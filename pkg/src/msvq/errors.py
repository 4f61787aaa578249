"""Exception types shared across the codec, with stable CLI exit codes.

The CLI maps each class to its exit code: configuration problems exit 2,
bad data exits 3, corrupted or mismatched files exit 4, and operations
invoked in the wrong pipeline state exit 5.
"""


class MsvqError(Exception):
    exit_code = 1


class ConfigError(MsvqError):
    """Invalid configuration: shape mismatches, bad presets, bad flags."""

    exit_code = 2


class DataError(MsvqError):
    """Invalid numeric input: non-finite values, too few samples."""

    exit_code = 3


class CorruptionError(MsvqError):
    """Malformed or mismatched serialized artifacts."""

    exit_code = 4


class StateError(MsvqError):
    """Operation requires a pipeline state that has not been reached."""

    exit_code = 5
