"""Exception hierarchy shared by all gausskey modules."""


class GausskeyError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GausskeyError, ValueError):
    pass


class NonFiniteError(GausskeyError, ValueError):
    """A non-finite value was found; ``index`` locates the first offender."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NotNormalizedError(GausskeyError, ValueError):
    pass


class DegenerateCovarianceError(GausskeyError, ValueError):
    pass


class NotPositiveDefiniteError(GausskeyError, ValueError):
    """Cholesky pivot was not strictly positive.

    ``pivot`` is 1 or 2 (which diagonal step failed) and ``value`` is the
    offending pivot before the square root.
    """

    def __init__(self, message, pivot, value):
        super().__init__(message)
        self.pivot = pivot
        self.value = value


class InvalidFactorError(GausskeyError, ValueError):
    pass


class RenderError(GausskeyError, ValueError):
    def __init__(self, message, landmark):
        super().__init__(message)
        self.landmark = landmark


class SingularSystemError(GausskeyError, ValueError):
    pass


class RankDeficientError(GausskeyError, ValueError):
    pass


class RolloutError(GausskeyError, RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class GradientError(GausskeyError, RuntimeError):
    def __init__(self, message, parameter):
        super().__init__(message)
        self.parameter = parameter


class DivergenceError(GausskeyError, RuntimeError):
    def __init__(self, message, step, loss):
        super().__init__(message)
        self.step = step
        self.loss = loss


class FormatError(GausskeyError, ValueError):
    """Malformed CSV, PGM, JSON or checkpoint input."""
