"""Exception types shared across the package."""


class PhononPulseError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(PhononPulseError, ValueError):
    """A physical or numerical parameter is out of its documented domain."""


class TruncationInsufficientError(PhononPulseError):
    """A truncated basis cannot represent a state to the required accuracy.

    Carries the measured norm deficit so callers can decide how much to
    enlarge the space.
    """

    def __init__(self, message, deficit):
        super().__init__(message)
        self.deficit = float(deficit)


class UndefinedDarkStateError(PhononPulseError, ValueError):
    """Both pulse amplitudes vanish, so the dark state has no direction."""


class ConfigError(PhononPulseError, ValueError):
    """An experiment configuration failed strict validation."""


class IntegrationError(PhononPulseError, RuntimeError):
    """Base class for time-evolution failures."""


class StiffnessError(IntegrationError):
    """The adaptive step size underflowed before reaching the target time."""

    def __init__(self, message, time):
        super().__init__(message)
        self.time = float(time)


class IntegrityError(IntegrationError):
    """A physical invariant (norm, trace, hermiticity, positivity) broke.

    ``invariant`` names the violated property and ``time`` locates the first
    sample where it was detected.
    """

    def __init__(self, message, invariant, time):
        super().__init__(message)
        self.invariant = str(invariant)
        self.time = float(time)


class NoExtremumError(PhononPulseError, ValueError):
    """An extremum search window contained no usable interior point."""


class UndefinedCorrelationError(PhononPulseError, ValueError):
    """A correlation function is requested where its reference moment vanishes."""


class ReproduceCheckError(PhononPulseError):
    """A figure-reproduction pipeline finished but its sanity checks failed."""
