"""Exception and warning types raised across the package."""


class SurfdistError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(SurfdistError):
    pass


class DegenerateMesh(SurfdistError):
    pass


class SparseSurfaceWarning(UserWarning):
    """More than 5% of the mask interior needed hole filling."""


class ShapeMismatch(SurfdistError, ValueError):
    pass


class TapeReuse(SurfdistError):
    pass


class NonFiniteGradient(SurfdistError):
    pass


class NonFinite(SurfdistError):
    pass


class EmptyMask(SurfdistError):
    pass


class Diverged(SurfdistError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"loss became non-finite at step {step}")


class TableTooLarge(SurfdistError, MemoryError):
    pass


class AllZeroMask(SurfdistError):
    pass


class DegenerateConfiguration(SurfdistError):
    pass


class NoRealSolution(SurfdistError):
    pass


class NoValidHypothesis(SurfdistError):
    pass


class EmptyVisibleSet(SurfdistError):
    pass


class NoConfidentPixels(SurfdistError):
    pass


class NoDepthOverlap(SurfdistError):
    pass


class FullyOccluded(SurfdistError):
    pass


class InvalidConfig(SurfdistError, ValueError):
    pass


class IoError(SurfdistError, OSError):
    pass
