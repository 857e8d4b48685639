"""Exception hierarchy shared across the package.

The CLI maps exceptions to exit codes: usage problems exit 1, data and
validation problems exit 2, numerical divergence exits 3.
"""


class RaffnetError(Exception):
    """Base class for package errors."""

    exit_code = 2


class ConfigError(RaffnetError):
    """Bad or inconsistent configuration supplied by the caller."""

    exit_code = 1


class DataError(RaffnetError):
    """Invalid dataset, manifest, image, or report content."""

    exit_code = 2


class CheckpointError(DataError):
    """Checkpoint file is missing, corrupt, or incompatible."""


class DivergenceError(RaffnetError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at optimization step {step}")
