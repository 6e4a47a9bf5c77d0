"""Proportion of a treatment effect on survival explained by landmark
surrogate information, estimated nonparametrically under censoring."""

from .censoring import StepSurvival, delta_hat, km_censoring, phi_hat
from .diagnostics import ConditionReport, check_conditions
from .errors import (
    CensoringSupportExhausted,
    DegenerateSurrogate,
    EmptyArm,
    EmptyRiskSet,
    EstimationError,
    GridOutsideSupport,
    InferenceAborted,
    MalformedRow,
    NonPositiveTime,
    SingularCovarianceWarning,
    StudyDataError,
    SupportOverlapWarning,
    SurrogateObservabilityViolation,
    TooFewDraws,
    UnstableRatioWarning,
)
from .estimators import Engine, EstimateSet, delta_s_hat, delta_t_hat, estimate, iv_s_hat, r_s_hat, r_t_hat
from .inference import FiellerSet, InferenceReport, augment, ci_fieller, ci_normal, ci_quantile, infer, perturb, variance
from .kernel import ConditionalSurvivalFit, KernelSpec, fit_conditional_survival, lambda_hat, psi_hat, resolve_bandwidth
from .simulation import SimulationSetting, SimulationReport, generate, generate_study, run_study, truth_oracle, truths
from .study_data import Arm, StudyData, SubjectRecord, load_study, summarize, write_study

__version__ = "0.1.0"
