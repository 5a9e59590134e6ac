from __future__ import annotations


class FedlocError(Exception):
    """Base exception for all fedloc library errors."""


class ConfigError(FedlocError):
    """Raised when tool or scenario configuration is invalid or incomplete."""


class DatasetError(FedlocError):
    """Raised when a fingerprint file or dataset violates its format."""

    def __init__(self, message: str, *, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(FedlocError, ValueError):
    """Raised on dimension or length mismatches between vectors and networks."""


class TrainingDivergedError(FedlocError):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, message: str, *, epoch: int, batch: int) -> None:
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch={epoch}, batch={batch})")


class AggregationError(FedlocError, ValueError):
    """Raised when client updates cannot be aggregated into the global model."""


class WireFormatError(FedlocError):
    """Raised when a binary record has a bad magic, version or length."""


class ScenarioError(FedlocError):
    """Raised when a scenario step fails; carries the seed/building/round context."""


class ResultsNotFoundError(FedlocError):
    """Raised when a results directory has no manifest.json."""
