"""Exception taxonomy shared by every dpdl module.

The split matters for the command line front end: validation problems map to
exit code 1, numeric failures (divergence, non-finite losses) map to exit
code 3.  Everything derives from DpdlError so callers can catch the whole
family at once.
"""


class DpdlError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DpdlError):
    """Caller passed arguments that violate a documented precondition."""


class FormatError(ValidationError):
    """A binary payload has an unrecognized magic string or version."""


class CorruptionError(ValidationError):
    """A binary payload is truncated or internally inconsistent."""


class ProtocolError(ValidationError):
    """A split protocol cannot be realized on the given dataset."""


class DegenerateInputError(ValidationError):
    """An input is degenerate for the requested operation (e.g. zero vector)."""


class DomainError(ValidationError):
    """A scalar argument lies outside the mathematical domain of an operation."""


class UnsupportedError(ValidationError):
    """The requested configuration is out of scope for this implementation."""


class UndefinedMetricError(ValidationError):
    """A metric is undefined on the given inputs (e.g. single-class AUC)."""


class NumericError(DpdlError):
    """A numeric computation produced non-finite values or failed to converge."""
