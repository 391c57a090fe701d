"""Exception types raised across the package."""


class UrbanFlowError(Exception):
    """Base class for all package errors."""


class InvalidArgument(UrbanFlowError, ValueError):
    pass


class NoOverlapError(UrbanFlowError):
    """No SSIM window lies fully inside the validity mask."""


class DegenerateInputError(UrbanFlowError, ValueError):
    pass


class InsufficientFeaturesError(UrbanFlowError):
    pass


class EstimationFailed(UrbanFlowError):
    pass


class InvalidGeometry(UrbanFlowError, ValueError):
    pass


class AmbiguousProjection(UrbanFlowError):
    pass


class OutOfRange(UrbanFlowError, ValueError):
    pass


class NumericalFailure(UrbanFlowError):
    pass


class InvalidInput(UrbanFlowError, ValueError):
    pass


class DivergenceError(UrbanFlowError):
    """Training produced a non-finite loss.

    ``params`` holds the last parameters for which the loss was finite.
    """

    def __init__(self, message, params=None, loss_trace=None):
        super().__init__(message)
        self.params = params
        self.loss_trace = loss_trace


class DependencyError(UrbanFlowError):
    """A pipeline stage is missing an upstream artifact."""

    def __init__(self, missing):
        super().__init__(f"missing upstream artifact: {missing}")
        self.missing = str(missing)
