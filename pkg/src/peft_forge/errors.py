"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4),
so library code should raise the most specific class that applies.
"""


class PeftForgeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PeftForgeError):
    """Invalid configuration: bad shapes requested, unknown names, out-of-range knobs."""


class DataError(PeftForgeError):
    """Malformed or unusable input data (bad JSONL rows, missing delimiters, bad token ids)."""


class NumericError(PeftForgeError):
    """Numerical failure: NaN inputs, diverged loss, failed gradient checks."""


class ShapeError(PeftForgeError, ValueError):
    """Operands with incompatible shapes; the message names both shapes."""


class GraphError(PeftForgeError, RuntimeError):
    """Misuse of the autodiff tape, e.g. running backward twice on one graph."""
