"""Shared exception types."""


class FallsafeError(Exception):
    """Base class for package errors."""


class DimensionMismatch(FallsafeError, ValueError):
    """Input vector/matrix dimension does not match the model or network."""


class SimulationDiverged(FallsafeError, RuntimeError):
    """Simulation produced a non-finite state."""

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = step_index
        super().__init__(message or f"non-finite state at step {step_index}")


class ConfigError(FallsafeError, ValueError):
    """Invalid or unknown configuration content."""


class MissingArtifact(FallsafeError, FileNotFoundError):
    """A required checkpoint/dataset is missing; names the producing command."""

    def __init__(self, path, producer: str):
        self.path = path
        self.producer = producer
        super().__init__(f"missing artifact {path}; produce it with `fallsafe {producer}`")
