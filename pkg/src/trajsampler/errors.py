"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures with 3, resume mismatches with 4.
"""


class TrajsamplerError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TrajsamplerError):
    """Invalid or inconsistent run configuration."""


class NumericalError(TrajsamplerError):
    """A numerical procedure failed in a detectable way."""


class PropagationError(NumericalError):
    """Trajectory propagation aborted.

    Attributes:
        status: integer status code from the integration core.
        t: time at which the abort happened (NU).
    """

    def __init__(self, message, status=0, t=0.0):
        super().__init__(message)
        self.status = status
        self.t = t


class CollisionError(PropagationError):
    """State entered the collision radius of one of the primaries."""


class DegeneratePrimerError(PropagationError):
    """Velocity costate magnitude fell below tolerance on a thrust arc."""


class SingularArcError(PropagationError):
    """Switching function and its rate both near zero over an interval."""


class GrazingSwitchError(PropagationError):
    """Switching-function rate too small at a located switch for the
    discontinuity map denominator to be trusted."""


class StepSizeUnderflowError(PropagationError):
    """Adaptive step size collapsed below the resolvable limit."""


class CorrectionError(NumericalError):
    """Periodic-orbit differential correction did not converge."""


class ResumeMismatchError(TrajsamplerError):
    """Snapshot does not match the active configuration."""
