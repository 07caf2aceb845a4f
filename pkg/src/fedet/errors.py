"""Exception types shared across the simulator."""

from __future__ import annotations


class FedETError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(FedETError, ValueError):
    """Array shapes do not line up."""


class ArgumentError(FedETError, ValueError):
    """An argument is outside its documented domain."""


class ConfigurationError(FedETError, ValueError):
    """A run or registry configuration is inconsistent."""


class StateError(FedETError, RuntimeError):
    """An operation was attempted on an object in an unusable state."""


class CSVParseError(FedETError, ValueError):
    def __init__(self, path: str, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class CheckpointError(FedETError, ValueError):
    def __init__(self, message: str, tensor: str | None = None) -> None:
        if tensor is not None:
            message = f"tensor {tensor!r}: {message}"
        super().__init__(message)
        self.tensor = tensor
