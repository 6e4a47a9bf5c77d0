"""Exception and warning types.

Two families are kept apart because the command line maps them to
different exit codes: problems with the input data (exit 2) and problems
that only surface while estimating (exit 3).
"""


class StudyDataError(ValueError):
    """Input data violates a structural invariant."""


class MalformedRow(StudyDataError):
    pass


class SurrogateObservabilityViolation(StudyDataError):
    pass


class NonPositiveTime(StudyDataError):
    pass


class EmptyArm(StudyDataError):
    pass


class EstimationError(ArithmeticError):
    """An estimator is undefined for the data at hand."""


class CensoringSupportExhausted(EstimationError):
    """The censoring survival curve reached zero at a time that is needed."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class EmptyRiskSet(EstimationError):
    pass


class DegenerateSurrogate(EstimationError):
    pass


class TooFewDraws(EstimationError):
    pass


class InferenceAborted(EstimationError):
    """Too many perturbation draws (or replicates) failed."""


class GridOutsideSupport(EstimationError):
    pass


class UnstableRatioWarning(UserWarning):
    """The treatment effect is too close to zero for a reliable ratio."""


class SupportOverlapWarning(UserWarning):
    """Surrogate evaluation points fall outside the arm-A support."""


class SingularCovarianceWarning(UserWarning):
    """The covariate-contrast covariance needed a ridge to be inverted."""
