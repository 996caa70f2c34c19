"""Exception types shared across the simulation modules."""


class QsfError(Exception):
    """Base class for all library errors."""


class DimensionError(QsfError):
    """Operator or state dimensions are inconsistent or invalid."""


class GridError(QsfError):
    """Time grid is malformed (non-positive step, non-integral T/dt, ...)."""


class InvalidPotentialError(QsfError):
    """Potential samples are non-finite on the quadrature support."""


class BlowUpError(QsfError):
    """A trajectory left the finite range (NaN/Inf) at some step."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"trajectory blew up at step {step}")


class DegenerateStateError(QsfError):
    """State norm or trace collapsed below the usable floor."""


class NotAStateError(QsfError):
    """Matrix is not a valid (sub-)density operator."""


class KernelDegeneracyError(QsfError):
    """Gaussian kernel coefficient left the admissible half-plane."""

    def __init__(self, t: float, message: str = ""):
        self.t = t
        super().__init__(message or f"kernel coefficient degenerate at t={t:g}")


class ResolutionError(QsfError):
    """Spatial grid cannot resolve the kernel oscillation or support."""


class ConfigError(QsfError):
    """Experiment configuration failed validation.

    ``field`` carries the dotted path of the offending entry.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
