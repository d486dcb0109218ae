"""Exception types shared across modules; the CLI maps each to an exit code."""


class ConfigError(ValueError):
    """Invalid user-supplied configuration or input file."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or out-of-domain values."""


class ResourceError(RuntimeError):
    """A job would exceed its configured work or memory cap."""
