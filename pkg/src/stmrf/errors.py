"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3,
OSError and friends -> 4.
"""


class DataError(ValueError):
    """Malformed or inconsistent input (files, configs, shapes)."""


class NumericalError(RuntimeError):
    """Degenerate data or a numerical procedure that cannot proceed."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, incomplete, or inconsistent with the run."""
