"""Exception taxonomy shared across the package.

Every error raised on a contract boundary derives from SemcrossError so
callers (and the CLI exit-code mapping) can tell our failures from bugs.
"""


class SemcrossError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SemcrossError):
    """Operands have incompatible or unsupported shapes."""


class ParameterError(SemcrossError):
    """A numeric argument is outside its legal range (tau <= 0, K < 2, ...)."""


class ContractError(SemcrossError):
    """An API precondition was violated (reused graph, non-scalar root, ...)."""


class FormatError(SemcrossError):
    """A file or stream does not match its declared on-disk format."""


class MissingTokenError(SemcrossError):
    """No word of a label text could be resolved in the vector table."""


class CapacityError(SemcrossError):
    """An episode request exceeds what the dataset split can supply."""


class ConfigError(SemcrossError):
    """A run configuration is missing, malformed, or inconsistent."""


class DivergenceError(SemcrossError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class VerificationError(SemcrossError):
    """A gradient or consistency check exceeded its tolerance."""
