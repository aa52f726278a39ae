"""Exception hierarchy for the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EngineError):
    """Invalid configuration value or inconsistent setup."""


class ShapeMismatchError(EngineError):
    """Tensor arguments violate a documented shape contract."""


class EventParseError(EngineError):
    """Malformed event file.  Carries the byte offset of the bad record."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(EngineError):
    """Event file declares a version this reader does not understand."""


class SampleTooShortError(EngineError):
    """Recording is shorter than the requested slice duration."""


class CheckpointError(EngineError):
    """Checkpoint payload is malformed or incompatible."""


class TopologyMismatchError(CheckpointError):
    """Checkpoint was written for a different network topology."""
