"""Exception hierarchy shared by every module."""


class MisleaderError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(MisleaderError, ValueError):
    pass


class ShapeMismatch(MisleaderError, ValueError):
    pass


class SizeMismatch(MisleaderError, ValueError):
    pass


class BadMagic(MisleaderError, ValueError):
    pass


class TruncatedFile(MisleaderError, ValueError):
    pass


class CountMismatch(MisleaderError, ValueError):
    pass


class VersionMismatch(MisleaderError, ValueError):
    pass


class ChecksumMismatch(MisleaderError, ValueError):
    pass


class GraphError(MisleaderError, RuntimeError):
    """Raised when a loss does not depend on the model being differentiated."""


class Unsupported(MisleaderError, NotImplementedError):
    pass


class BoundViolation(MisleaderError, ValueError):
    """A loss value exceeded its declared upper bound."""


class BudgetExceeded(MisleaderError, RuntimeError):
    """A query would push an oracle past its budget."""


class TooLargeForExact(MisleaderError, ValueError):
    pass


class ConfigError(MisleaderError, ValueError):
    """Experiment configuration failed validation; message names the field."""


class StageError(MisleaderError, RuntimeError):
    """A pipeline stage failed; the message carries the stage name."""
