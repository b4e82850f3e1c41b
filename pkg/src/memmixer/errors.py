"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(EngineError):
    """Operands have incompatible or out-of-contract shapes."""


class TapeError(EngineError):
    """Gradient-tape misuse: reused tape, non-scalar loss, and the like."""


class NonFiniteError(EngineError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ConfigError(EngineError):
    """Invalid build-time or run-time configuration."""


class DataError(EngineError):
    """Malformed feature container, manifest, or checkpoint."""


class ContainerFormatError(DataError):
    """Feature-container file rejected; ``code`` names the exact reason."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class UndefinedMetricError(EngineError):
    """Metric is mathematically undefined for the given input."""
