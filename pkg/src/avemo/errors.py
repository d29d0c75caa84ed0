"""Exception types shared across the pipeline.

The CLI maps these onto exit codes, so library code raises the most specific
one that applies.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Malformed or missing input data (CLI exit code 3)."""

    def __init__(self, message, frame_index=None):
        if frame_index is not None:
            message = f"frame {frame_index}: {message}"
        super().__init__(message)
        self.frame_index = frame_index


class VerificationError(RuntimeError):
    """A self-check (gradient check, invariant) failed (CLI exit code 4)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimisation."""
