"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific one that applies.
"""


class EitMonoError(Exception):
    """Base class for all package errors."""


class ParameterError(EitMonoError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(EitMonoError, ValueError):
    """A run configuration is inconsistent or violates a theoretical bound."""


class FormatError(EitMonoError, ValueError):
    """A file does not follow its documented format."""


class NumericalError(EitMonoError, RuntimeError):
    """A numerical routine failed or produced an unusable result."""
