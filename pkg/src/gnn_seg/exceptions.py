"""Typed exceptions for the gnn-seg pipeline.

Every error carries the process exit code the CLI reports for it:
2 for validation failures, 3 for I/O failures, 4 for numerical failures.
"""

from __future__ import annotations

from typing import Any

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class GnnSegError(RuntimeError):
    """Base class for all pipeline errors."""

    exit_code: int = 1

    def __init__(self, message: str, **details: Any) -> None:
        self.message = message
        self.details = {k: v for k, v in details.items() if v is not None}
        super().__init__(str(self))

    def __str__(self) -> str:
        parts = [f"{type(self).__name__}: {self.message}"]
        parts.extend(f"{k}={v}" for k, v in self.details.items())
        return " | ".join(parts)

    def to_dict(self) -> dict[str, Any]:
        """Serialize exception to dictionary for logging/export."""
        return {
            "error_type": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            **self.details,
        }


class ValidationError(GnnSegError):
    exit_code = EXIT_VALIDATION


class ConfigError(ValidationError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class MetricUndefinedError(ValidationError):
    pass


class ImageIOError(GnnSegError):
    exit_code = EXIT_IO


class UnsupportedFormatError(ImageIOError):
    pass


class CheckpointError(ImageIOError):
    pass


class NumericalError(GnnSegError):
    """Raised when a non-finite value shows up in a forward or backward pass.

    `layer` names the parameterized block that produced it; `sample_index`
    identifies the training sample when the failure happened during training.
    """

    exit_code = EXIT_NUMERICAL

    def __init__(
        self,
        message: str,
        *,
        layer: str | None = None,
        sample_index: int | None = None,
        **details: Any,
    ) -> None:
        self.layer = layer
        self.sample_index = sample_index
        super().__init__(message, layer=layer, sample_index=sample_index, **details)
