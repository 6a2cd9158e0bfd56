"""Exception types shared across the package."""


class CutoffSGDError(Exception):
    pass


class TraceFormatError(CutoffSGDError, ValueError):
    """A trace file row violates the format or the trace invariants."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message} at line {line}"
        super().__init__(message)


class InsufficientDataError(CutoffSGDError, ValueError):
    pass


class DomainError(CutoffSGDError, ValueError):
    pass


class ShapeError(CutoffSGDError, ValueError):
    pass


class ModelError(CutoffSGDError, RuntimeError):
    pass


class TrainingError(CutoffSGDError, RuntimeError):
    pass


class CheckpointError(CutoffSGDError, ValueError):
    pass


class ValidationError(CutoffSGDError, ValueError):
    pass


class ReplayExhausted(CutoffSGDError, LookupError):
    pass
