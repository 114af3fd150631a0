"""Exception types shared across the package.

The CLI maps each family onto a distinct exit code, so keep the hierarchy flat.
"""


class ConfigError(ValueError):
    """Invalid configuration value or violated precondition on user input."""


class DataFormatError(ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericError(ArithmeticError):
    """Non-finite loss, gradient or parameter encountered during training."""


class NoConfidentSamples(ValueError):
    """Confident split produced an empty group."""


class DimensionMismatch(ValueError):
    """Dataset and model disagree on feature or class dimensions."""
