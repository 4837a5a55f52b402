"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation failures exit 1,
numerical failures exit 2, and I/O failures (plain OSError) exit 3.
"""


class DepiError(Exception):
    """Base class for all package errors."""


class ValidationError(DepiError, ValueError):
    """Invalid inputs, malformed configs, contract violations."""


class MaskMismatchError(ValidationError):
    """Two fields that must share a foreground mask do not."""


class NumericalError(DepiError, ArithmeticError):
    """Degenerate geometry or a diverging computation."""


class DegenerateProjectionError(NumericalError):
    """Point at or behind the camera plane (non-positive depth)."""


class DegenerateBaselineError(NumericalError):
    """Camera centers coincide; no fundamental matrix exists."""


class DegenerateEpipolarLineError(NumericalError):
    """Epipolar line has a vanishing image-plane normal (point at the epipole)."""


class TriangulationError(NumericalError):
    """Ill-conditioned triangulation (near-parallel viewing rays)."""


class DivergenceError(NumericalError):
    """Refinement loss exceeded the divergence guard.

    Carries the partial trace recorded up to the aborting iteration.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class UndefinedMetricError(NumericalError):
    """A metric has an empty domain (e.g. no mutually visible pixels)."""
