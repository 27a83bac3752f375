"""Exception types raised across the package.

The CLI maps each family onto a stable exit code, so library code raises these
rather than bare ``ValueError``.
"""


class KansaeError(Exception):
    """Base class for all package errors."""


class ConfigError(KansaeError, ValueError):
    """Invalid configuration or argument values."""


class InvalidDomainError(KansaeError, ValueError):
    pass


class DimensionError(KansaeError, ValueError):
    pass


class EmptyInputError(KansaeError, ValueError):
    pass


class DegenerateDistributionError(KansaeError, ValueError):
    pass


class ModeError(KansaeError, ValueError):
    """Operation not defined for the model's encoder mode."""


class RegionError(KansaeError, ValueError):
    pass


class InvalidMapError(KansaeError, ValueError):
    pass


class UndefinedVarianceError(KansaeError, ValueError):
    pass


class FitError(KansaeError, ValueError):
    pass


class FormatError(KansaeError):
    """Bad magic, version or header in a binary file."""


class LengthError(FormatError):
    """Payload shorter (or longer) than the header declares."""


class ConsistencyError(FormatError):
    """Header fields disagree with each other or with the blob sizes."""


class ValidationError(KansaeError, ValueError):
    """Refusing to write non-finite data."""


class NonFiniteGradientError(KansaeError, FloatingPointError):
    def __init__(self, block: str, n_bad: int):
        super().__init__(f"non-finite gradient in block {block!r} ({n_bad} entries)")
        self.block = block
        self.n_bad = n_bad


class NumericalAbort(KansaeError, FloatingPointError):
    """Training hit a non-finite loss or gradient.

    ``last_good`` holds the parameters (and optimizer state) from the end of the
    last fully completed epoch, or ``None`` when no epoch completed.
    """

    def __init__(self, message, last_good=None, last_good_adam=None, epochs_done=0):
        super().__init__(message)
        self.last_good = last_good
        self.last_good_adam = last_good_adam
        self.epochs_done = epochs_done
