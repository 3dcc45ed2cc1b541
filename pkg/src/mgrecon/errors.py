"""Exception hierarchy shared by all pipeline stages."""


class MGReconError(Exception):
    """Base class for every error raised by mgrecon."""


class BehindCamera(MGReconError):
    pass


class NonPositiveDepth(MGReconError):
    pass


class DegenerateRays(MGReconError):
    pass


class NegativeConfidence(MGReconError):
    pass


class NoPredictionsForView(MGReconError):
    pass


class MissingArtifact(MGReconError):
    pass


class DimensionMismatch(MGReconError):
    pass


class UncoveredView(MGReconError):
    def __init__(self, view, message=None):
        self.view = view
        super().__init__(message or f"view {view} has no pair with enough valid matches")


class InsufficientSupport(MGReconError):
    pass


class ZeroPredictedDepthSum(MGReconError):
    pass


class NonFiniteLoss(MGReconError):
    """Raised when the objective becomes non-finite; ``depths`` holds the last good state."""

    def __init__(self, message, depths=None):
        super().__init__(message)
        self.depths = depths


class EmptyCloud(MGReconError):
    pass


class DegenerateRegion(MGReconError):
    pass


class StageError(MGReconError):
    """Wraps an error raised inside a pipeline stage, naming the stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
