"""Multi-group estimation of Gaussian multiplicative model-uncertainty factors.

Functional core: :mod:`circe_mg.model` (data containers, likelihood),
:mod:`circe_mg.ecme` (multi-start ECME fit), :mod:`circe_mg.diagnostics`
(Fisher information, NEC, residuals, prediction intervals),
:mod:`circe_mg.htests` (Wald, AIC, KS), :mod:`circe_mg.synthetic`
(simulation and replication studies).  :class:`CirceEstimator` wraps the fit
in a scikit-learn style interface, and :mod:`circe_mg.cli` exposes the
``circe-mg`` command.
"""
from .diagnostics import (
    AsymptoticVariances,
    DiagnosticsReport,
    FisherBlocks,
    asymptotic_variances,
    diagnostics_report,
    fisher_information,
    nec,
    prediction_interval,
    standardized_residuals,
)
from .ecme import (
    EcmeConfig,
    FitResult,
    closed_form_mle,
    ecme_step_multigroup,
    fit_multigroup,
    fit_regular,
    initial_params,
)
from .estimator import CirceEstimator
from .exceptions import (
    CirceError,
    DegenerateVariance,
    DimensionMismatch,
    EmptyGroup,
    IndexOutOfRange,
    NegativeNoiseVariance,
    ParseError,
    PreconditionViolated,
    RankDeficientH,
    SingularNormalEquations,
    TooFewSamples,
)
from .htests import (
    KsResult,
    WaldResult,
    aic,
    ks_normality_test,
    n_parameters,
    qq_plot_data,
    wald_test,
)
from .model import (
    Dataset,
    ModelParams,
    PredictiveMoments,
    log_likelihood,
    observation_variances,
    predictive_moments,
    validate_dataset,
)
from .synthetic import (
    FixedDesign,
    GroupRanges,
    NoiseSpec,
    ReplicationReport,
    SimulationSpec,
    UniformColumns,
    nec_curve_export,
    nec_study,
    replicate,
    simulate,
    violin_export,
)

__version__ = "0.1.0"

__all__ = [
    "AsymptoticVariances",
    "CirceError",
    "CirceEstimator",
    "Dataset",
    "DegenerateVariance",
    "DiagnosticsReport",
    "DimensionMismatch",
    "EcmeConfig",
    "EmptyGroup",
    "FisherBlocks",
    "FitResult",
    "FixedDesign",
    "GroupRanges",
    "IndexOutOfRange",
    "KsResult",
    "ModelParams",
    "NegativeNoiseVariance",
    "NoiseSpec",
    "ParseError",
    "PreconditionViolated",
    "PredictiveMoments",
    "RankDeficientH",
    "ReplicationReport",
    "SimulationSpec",
    "SingularNormalEquations",
    "TooFewSamples",
    "UniformColumns",
    "WaldResult",
    "aic",
    "asymptotic_variances",
    "closed_form_mle",
    "diagnostics_report",
    "ecme_step_multigroup",
    "fisher_information",
    "fit_multigroup",
    "fit_regular",
    "initial_params",
    "ks_normality_test",
    "log_likelihood",
    "n_parameters",
    "nec",
    "nec_curve_export",
    "nec_study",
    "observation_variances",
    "prediction_interval",
    "predictive_moments",
    "qq_plot_data",
    "replicate",
    "simulate",
    "standardized_residuals",
    "validate_dataset",
    "violin_export",
    "wald_test",
]
