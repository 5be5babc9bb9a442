"""Exception hierarchy shared by all invc modules.

Each class maps to one failure category surfaced by the CLI with a
distinct exit code (see cli.EXIT_CODES).
"""


class InvcError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(InvcError):
    """Invalid or inconsistent configuration values."""


class IngestionError(InvcError):
    """Input data could not be read or decoded (missing/corrupt audio, empty corpus)."""


class SizeError(InvcError):
    """Array shape or length violates an operation's contract."""


class NumericError(InvcError):
    """Non-finite values where finite ones are required."""


class CheckpointError(InvcError):
    """Checkpoint file is missing, corrupted, or has an incompatible version."""
