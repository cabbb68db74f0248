"""
Exception types raised by the library.

Library code raises these; only the command line layer turns them into
`error:` lines and exit codes.
"""


class AffkitError(Exception):
    """Root of every error raised by this package."""

    exit_code = 2


class ShapeError(AffkitError, ValueError):
    """Inconsistent dimensions, channel counts or non-positive output sizes."""


class NonFiniteError(AffkitError, ArithmeticError):
    """A NaN or Inf showed up where a finite value is required."""


class ConfigError(AffkitError, ValueError):
    """Configuration file, value or environment setting is invalid."""

    exit_code = 1


class AnnotationError(AffkitError, ValueError):
    """Manifest, NetPBM file or mask content failed validation."""

    exit_code = 1

    def __init__(self, message: str, path=None, line: int = None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class CheckpointError(AffkitError, ValueError):
    """Checkpoint file is corrupt, truncated or of an unknown version."""

    def __init__(self, message: str, offset: int = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PlacementError(AffkitError, RuntimeError):
    """Synthetic scene objects could not be placed without overlap."""


class UsageError(AffkitError):
    """Bad command line flags."""

    exit_code = 1
