"""Exception hierarchy shared across the pipeline.

CLI exit-code mapping: UsageError -> 1, data/protocol errors -> 2,
NumericalFailureError -> 3.
"""


class CrossfaceError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(CrossfaceError, ValueError):
    """A parameter violates an operation's precondition."""


class InvalidInputError(CrossfaceError, ValueError):
    """Input data is malformed or inconsistent (shape, modality, tag)."""


class ProtocolError(CrossfaceError):
    """An evaluation protocol constraint is violated."""


class ArtifactError(CrossfaceError):
    """A required upstream artifact is missing or incompatible."""

    def __init__(self, message: str, produced_by: str | None = None):
        if produced_by:
            message = f"{message} (produce it with `crossface {produced_by}`)"
        super().__init__(message)
        self.produced_by = produced_by


class NumericalFailureError(CrossfaceError):
    """A numerical routine could not complete (rank deficiency, divergence)."""

    def __init__(self, message: str, components_achieved: int | None = None):
        super().__init__(message)
        self.components_achieved = components_achieved


class UsageError(CrossfaceError):
    """Bad command line or config usage."""
