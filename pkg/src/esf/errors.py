"""Exception types shared across the package."""


class EsfError(Exception):
    """Base class for package errors."""


class FormatError(EsfError):
    """Bytes do not look like the expected container or frame format."""


class CorruptionError(EsfError):
    """A checksum failed. Carries the byte offset of the bad frame when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class TruncationError(EsfError):
    """A frame or file was cut short."""


class ConfigurationError(EsfError):
    """Invalid or unsatisfiable configuration."""


class DegenerateGeometryError(EsfError):
    """Source and microphone coincide; no impulse response exists."""


class DegenerateSignalError(EsfError):
    """A signal has zero power where nonzero power is required."""


class DeliveryError(EsfError):
    """Batch stream broke mid-epoch. Carries the last received batch ordinal."""

    def __init__(self, message: str, last_ordinal: int | None = None):
        super().__init__(message)
        self.last_ordinal = last_ordinal


class LaunchError(EsfError):
    """A server process failed to start. Carries the server index."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ScorerContractError(EsfError):
    """A step scorer returned an unnormalized log-probability vector."""
