"""Exception types shared across the package."""


class EpcsimError(Exception):
    """Base class for package errors."""


class DomainError(EpcsimError, ValueError):
    """An argument is outside the physically meaningful domain."""


class ResolutionError(EpcsimError):
    """A numerical quadrature was requested with insufficient sampling."""


class SaturationError(EpcsimError, ValueError):
    """A measured rate is at or beyond the dead-time saturation limit."""


class ContractError(EpcsimError, ValueError):
    """An input violates a documented precondition (e.g. unsorted times)."""


class ConfigError(EpcsimError):
    """A configuration file or config object is invalid."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        parts = [message]
        if key is not None:
            parts.append(f"(key: {key})")
        if line is not None:
            parts.append(f"(line {line})")
        super().__init__(" ".join(parts))


class StreamParseError(EpcsimError):
    """A binary event stream could not be decoded.

    Carries the byte offset of the failure and, where applicable, the
    number of bytes expected vs available.
    """

    def __init__(self, message, offset, expected=None, available=None):
        self.offset = offset
        self.expected = expected
        self.available = available
        detail = f"{message} at byte offset {offset}"
        if expected is not None:
            detail += f" (expected {expected} bytes, {available} available)"
        super().__init__(detail)


class EstimationError(EpcsimError):
    """A statistical estimate could not be formed from the given data."""


class PeakDetectionError(EpcsimError):
    """No significant coincidence peak was found."""


class FitError(EpcsimError):
    """A model fit failed; carries residual diagnostics when available."""

    def __init__(self, message, residuals=None):
        self.residuals = residuals
        super().__init__(message)
