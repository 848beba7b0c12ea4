"""Exception taxonomy shared across the package."""


class Harm25dError(Exception):
    """Base class for all package-specific errors."""


class FormatError(Harm25dError):
    """A file does not conform to the MVOL container format."""


class CorruptionError(Harm25dError):
    """A file parses but its payload is inconsistent with its header."""


class ConfigError(Harm25dError):
    """A configuration object violates its invariants."""


class DegenerateInputError(Harm25dError):
    """Input is numerically degenerate for the requested operation."""


class NumericError(Harm25dError):
    """A computation produced non-finite values."""


class EmptyDomainError(Harm25dError):
    """A sampling domain contains no qualifying elements."""


class PairingError(Harm25dError):
    """Two runs that must be paired element-by-element do not align."""


class TrainingDivergedError(Harm25dError):
    """Loss exceeded the divergence threshold for several consecutive epochs."""
