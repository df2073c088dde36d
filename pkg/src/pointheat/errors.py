"""Exception types raised across the package."""


class PointHeatError(Exception):
    """Base class for all package errors."""


class InvalidField(PointHeatError, ValueError):
    pass


class InvalidParam(PointHeatError, ValueError):
    pass


class ShapeError(PointHeatError, ValueError):
    pass


class UnstableStep(PointHeatError, ValueError):
    """Explicit step size exceeds the stability bound of the edge weights."""


class AnnotationError(PointHeatError, ValueError):
    pass


class TapeError(PointHeatError, RuntimeError):
    """A backward pass was requested with a tape that no longer matches its model."""


class DivergenceError(PointHeatError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class NotReady(PointHeatError, RuntimeError):
    pass


class GenerationError(PointHeatError, RuntimeError):
    pass


class IngestError(PointHeatError, ValueError):
    pass
