"""Exception types shared across the package.

The CLI maps these onto exit codes (usage 1, data/validation 2, numeric 3).
"""


class TernError(Exception):
    pass


class ArgumentError(TernError, ValueError):
    """Bad argument to an operation (shape, range, empty input)."""


class ConfigError(TernError, ValueError):
    """Inconsistent or unknown configuration."""


class ParseError(TernError, ValueError):
    """Malformed input file."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ValidationError(TernError, ValueError):
    """Well-formed input whose content violates an invariant."""


class NumericError(TernError, ArithmeticError):
    """Non-finite value encountered in a forward/backward pass or update."""
