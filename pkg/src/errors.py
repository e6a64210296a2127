"""
Error types for the immersed-body solver.

Precondition violations raise ValueError; numerical failures raise a
SolverError subclass so the CLI can map them to exit codes.
"""

from typing import Optional


class SolverError(RuntimeError):
    """Base class for numerical failures during a run."""


class SingularSystemError(SolverError):
    """A dense linear system could not be factored reliably."""

    def __init__(self, message: str, condition: Optional[float] = None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class ChartExitError(SolverError):
    """The attitude left the quaternion chart |q| < 1."""


class CollisionError(SolverError):
    """A vorticity marker came too close to the body surface."""

    def __init__(self, message: str, marker_index: int = -1, distance: float = float('nan')):
        super().__init__(message)
        self.marker_index = marker_index
        self.distance = distance


class NonContractionError(SolverError):
    """Picard ratios stayed above one; the horizon is too long."""

    def __init__(self, message: str, ratios=None):
        super().__init__(message)
        self.ratios = list(ratios or [])


class ConvergenceError(SolverError):
    """An iterative solve stopped before reaching its tolerance."""

    def __init__(self, message: str, best_residual: float = float('nan'), iterations: int = 0):
        super().__init__(f"{message} (best residual {best_residual:.3e} after {iterations} iterations)")
        self.best_residual = best_residual
        self.iterations = iterations


class ControllabilityError(SolverError):
    """The endpoint map is rank deficient in the direction of the target."""

    def __init__(self, message: str, rank: int = 0):
        super().__init__(f"{message} (rank {rank})")
        self.rank = rank


class VorticityTooLargeError(SolverError):
    """Measured retargeting deviation is not below the allowed bound."""

    def __init__(self, message: str, epsilon: float = float('nan')):
        super().__init__(f"{message} (measured epsilon {epsilon:.3e})")
        self.epsilon = epsilon


class VerificationError(Exception):
    """One or more residual thresholds were exceeded."""

    def __init__(self, message: str, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])
