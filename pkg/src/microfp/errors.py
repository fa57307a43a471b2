"""Exception types shared across the package.

The CLI maps these onto its exit-code convention: usage errors exit 2
(handled by argparse), DataError exits 3, NumericalError exits 4.
"""


class DataError(ValueError):
    """Invalid input data: bad shapes, non-finite elements, corrupt files."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (e.g. Cholesky factorization)."""
