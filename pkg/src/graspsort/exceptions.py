"""Exception and warning types raised across the pipeline."""


class GraspSortError(Exception):
    """Base class for all pipeline errors."""


class FrameMismatchError(GraspSortError, ValueError):
    """Two transforms (or a transform and a cloud) do not share a frame."""

    def __init__(self, expected, got):
        self.expected = expected
        self.got = got
        super().__init__(f"frame chain broken: expected {expected!r}, got {got!r}")


class BehindCameraError(GraspSortError, ValueError):
    """A point with non-positive depth was projected."""


class DegenerateError(GraspSortError, ValueError):
    """Input geometry is rank deficient for the requested fit."""


class DetectionFileError(GraspSortError, ValueError):
    """A detection file or one of its records is malformed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoCandidateError(GraspSortError):
    """No cluster centroid can be associated with a detection."""


class NoTargetError(GraspSortError):
    """No detection matches the priority class list."""


class NoGraspError(GraspSortError):
    """Grasp generation produced no viable candidate."""


class UnreachableError(GraspSortError):
    """Inverse kinematics did not converge."""

    def __init__(self, message, residual=None, q_best=None):
        self.residual = residual
        self.q_best = q_best
        super().__init__(message)


class PlanningError(GraspSortError):
    """Trajectory optimization failed to reach a feasible trajectory."""

    def __init__(self, message, best_clearance=None, trajectory=None):
        self.best_clearance = best_clearance
        self.trajectory = trajectory
        super().__init__(message)


class ReplayAborted(GraspSortError):
    """The replay sink failed; ``log`` holds the emissions made so far."""

    def __init__(self, message, log=None):
        self.log = log
        super().__init__(message)


class ConfigError(GraspSortError, ValueError):
    """Scenario, robot or parameter file is invalid."""


class SparseCloudWarning(UserWarning):
    """A filter was skipped because the cloud has too few points."""


class GraspWarning(UserWarning):
    """Grasp generation ran on input too sparse to build local frames."""
