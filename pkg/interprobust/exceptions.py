"""
exceptions.py - Error hierarchy shared by the services, the CLI and the HTTP routes

Every error carries an exit_code; the CLI turns it into the process status and the
routes turn it into an HTTP status.
"""

from typing import Sequence


class InterprobustError(Exception):
    exit_code: int = 1


# --- config (exit 1) ---

class ConfigError(InterprobustError):
    """Unknown, missing or invalid run-config key"""

    exit_code = 1

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message if key is None else f"{key}: {message}")


# --- I/O and formats (exit 2) ---

class DataFormatError(InterprobustError):
    exit_code = 2


class IdxMagicError(DataFormatError):
    pass


class IdxCountMismatchError(DataFormatError):
    pass


class IdxTruncatedError(DataFormatError):
    pass


class CheckpointError(InterprobustError):
    exit_code = 2


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


# --- numerics (exit 3) ---

class NumericError(InterprobustError):
    exit_code = 3


class InsufficientSamplesError(InterprobustError):
    exit_code = 3


class BoundViolationError(InterprobustError):
    """A successful attack broke the completeness lower bound"""

    exit_code = 3


# --- preconditions ---

class ShapeMismatchError(InterprobustError, ValueError):
    exit_code = 3

    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int]):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shape mismatch {self.shape_a} vs {self.shape_b}")


class GradientError(InterprobustError, ValueError):
    exit_code = 3


class InterpretationError(InterprobustError, ValueError):
    exit_code = 3


class DiscrepancyError(InterprobustError, ValueError):
    exit_code = 3


class AttackError(InterprobustError, ValueError):
    exit_code = 3
