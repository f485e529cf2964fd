"""Exception hierarchy shared by every module."""


class HdEnkfError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(HdEnkfError, ValueError):
    pass


class NotPositiveDefinite(HdEnkfError, ValueError):
    pass


class InnovationCovarianceNotPD(NotPositiveDefinite):
    """H Sigma H^T + R failed to factor; the forecast covariance needs repair."""


class InsufficientMembers(HdEnkfError, ValueError):
    pass


class BandwidthOutOfRange(HdEnkfError, ValueError):
    pass


class OddTaperWidth(HdEnkfError, ValueError):
    pass


class GenerationFailed(HdEnkfError, RuntimeError):
    pass


class InvalidIndices(HdEnkfError, ValueError):
    pass


class DimensionTooSmall(HdEnkfError, ValueError):
    pass


class DegenerateLikelihood(HdEnkfError, ValueError):
    pass


class NonFiniteState(HdEnkfError, FloatingPointError):
    pass


class ModelBlewUp(NonFiniteState):
    """An ensemble member left the finite range during a forecast."""


class CflViolation(HdEnkfError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
