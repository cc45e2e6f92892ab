"""Exception hierarchy shared across the package."""


class InlaPlusError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(InlaPlusError):
    """Cholesky factorization failed; caller decides whether to jitter."""


class NonFiniteInput(InlaPlusError):
    """Input matrix or vector contains NaN or Inf."""


class SingularInnerSystem(InlaPlusError):
    """The inner system of the low-rank covariance update is numerically singular."""


class DimensionOverflow(InlaPlusError):
    """A Kronecker product would exceed the configured dense size cap."""


class DegenerateConstraints(InlaPlusError):
    """Constraint rows are linearly dependent or C Sigma C^T is singular."""


class OverflowGuard(InlaPlusError):
    """Likelihood evaluation would overflow (rate above ~1e300)."""


class GaussianApproxDiverged(InlaPlusError):
    """The inner Gaussian approximation did not converge."""


class NoConvergence(InlaPlusError):
    """An iterative routine hit its iteration cap without converging."""


class MaxIterations(InlaPlusError):
    """Optimizer reached the iteration cap before the gradient tolerance."""


class LineSearchFailed(InlaPlusError):
    """Backtracking line search could not find an acceptable step."""


class NotNegativeDefinite(InlaPlusError):
    """Hessian at the reported mode is not negative definite."""


class NonPositiveDrop(InlaPlusError):
    """Log density does not decrease away from the mode; mode finding failed."""


class IndefiniteQc(InlaPlusError):
    """The corrected-precision system of the mean update is not positive definite."""


class UnsupportedDimension(InlaPlusError):
    """Requested design dimension is outside the supported range."""


class EmptyPlan(InlaPlusError):
    """An exploration plan with no points was supplied."""


class WorkerFailure(InlaPlusError):
    """A worker task raised; carries the failing task id."""

    def __init__(self, task_id: int, cause: BaseException):
        super().__init__(f"task {task_id} failed: {cause!r}")
        self.task_id = task_id
        self.cause = cause


class MaxRedraws(InlaPlusError):
    """Random graph generation failed to produce a connected graph."""


class ModelSpecError(InlaPlusError):
    """The model specification file is malformed (CLI exit code 2)."""


class DataMismatchError(InlaPlusError):
    """The data file is missing or inconsistent with the spec (CLI exit code 3)."""


class InferenceFailure(InlaPlusError):
    """An inference stage failed (CLI exit code 4); carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"inference failed in stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause
