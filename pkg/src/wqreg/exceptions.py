"""Error taxonomy shared across the library and the CLI.

Each class maps to one CLI exit code so that scripted callers can tell
configuration mistakes from bad data and from numerical failures.
"""


class WqregError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(WqregError):
    """Invalid usage, flags, config keys, or input file schema (exit code 2)."""


class DataError(WqregError):
    """Structurally valid input that cannot be analyzed (exit code 3).

    Examples: zero usable rows, rank-deficient design, degenerate scores.
    """


class SolverError(WqregError):
    """Numerical failure inside the estimating-equation solver (exit code 4)."""
