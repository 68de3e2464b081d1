"""Exception types shared across the toolkit."""


class AberroError(Exception):
    """Base class for toolkit errors."""


class GridMismatchError(AberroError):
    """Inputs were sampled on incompatible grids or stack/config dims disagree."""


class IllPosedError(AberroError):
    """A linear solve is too badly conditioned to trust (e.g. mode decomposition
    on a mask with too few pixels)."""


class DegenerateInputError(AberroError):
    """Input carries no usable signal (e.g. an all-zero intensity stack)."""


class FitDivergedError(AberroError):
    """The PSF fit produced a non-finite objective. Carries the objective trace
    accumulated up to the failure."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = list(trace)
