"""Exception types shared across the package.

Plain invalid input (bad shapes, out-of-range parameters, malformed files) raises
ValueError; the classes below mark failures of the numerical problem itself.
"""


class VblError(Exception):
    """Base class for domain errors."""


class CheiralityError(VblError):
    """A point lies behind (or on) a camera, so the projection is undefined."""


class DegenerateGeometryError(VblError):
    """Geometry makes an operation ill-posed (e.g. coincident vehicles)."""


class UnobservableConfigurationError(VblError):
    """The information matrix is singular beyond its structural translation
    null space, so the relative error bound does not exist.  Typical causes:
    too few transmitted measurements (all range bits zero kills the scale
    direction) or degenerate node geometry."""


class EstimationFailureError(VblError):
    """The nonlinear least-squares estimator diverged or stalled.

    Carries the per-iteration cost trace for diagnostics.
    """

    def __init__(self, message, cost_trace=None):
        super().__init__(message)
        self.cost_trace = list(cost_trace) if cost_trace is not None else []
