"""Exception types shared across the library."""


class DiffPnPError(Exception):
    """Base class for all library-specific failures."""


class NotARotation(DiffPnPError):
    """Matrix fails the orthogonality or determinant check for SO(3)."""


class PointBehindCamera(DiffPnPError):
    """A 3D point maps to non-positive camera-frame depth.

    Attributes:
        index: index of the first offending point.
        depth: its camera-frame depth.
    """

    def __init__(self, index: int, depth: float):
        self.index = int(index)
        self.depth = float(depth)
        super().__init__(f"point {self.index} has camera-frame depth {self.depth:.3e}")


class Degenerate(DiffPnPError):
    """Minimal sample is unusable (collinear 3D points or coincident 2D points)."""


class NoHypothesisFound(DiffPnPError):
    """Every RANSAC sample produced a degenerate or invalid pose hypothesis."""


class NumericalFailure(DiffPnPError):
    """Linear algebra broke down beyond what damping can recover."""


class SingularStationaryHessian(DiffPnPError):
    """The stationarity Jacobian w.r.t. the pose is too ill-conditioned to invert.

    Gradients computed past this point would be garbage; callers must not
    swallow this error.
    """

    def __init__(self, condition: float, limit: float):
        self.condition = float(condition)
        self.limit = float(limit)
        super().__init__(
            f"stationarity Hessian condition {self.condition:.3e} exceeds {self.limit:.3e}"
        )


class GenerationFailed(DiffPnPError):
    """Synthetic scene sampling exhausted its retry budget."""
