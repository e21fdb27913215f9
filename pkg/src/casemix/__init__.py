"""Transporting randomized-trial treatment effects across trial populations.

Standardizes each trial's effect to every trial's covariate distribution
(outcome regression or inverse odds weighting), attaches a joint covariance
(stacked estimating equations or stratified bootstrap), pools per target
population with random-effects meta-analysis, and tests whether heterogeneity
survives after case-mix differences are removed.
"""

from .errors import (
    AllSameResponse,
    CasemixError,
    ConditionNumberWarning,
    DimensionMismatch,
    DivisionByZero,
    EmptyArm,
    EmptyDataset,
    EmptyTarget,
    MissingColumn,
    NoConvergence,
    NoEstimableInputs,
    NonBinaryValue,
    NonNumericCovariate,
    PositivityWarning,
    RankDeficient,
    SeparationWarning,
    SingleArmStudy,
    SingularBread,
    SingularContrastCovariance,
    TooManyFailedReplicates,
    UndefinedMeasure,
    UnknownReference,
    UnknownStudy,
)
from .formula import ModelFormula, parse
from .glm import (
    FittedLogistic,
    FittedMultinomial,
    backward_eliminate,
    fit_logistic,
    fit_multinomial,
    predict_prob,
)
from .het import (
    RAW,
    TRANSFORMED,
    WaldTestResult,
    all_tests,
    beyond_casemix_test,
    casemix_test,
    conventional_test,
    report_records,
    wald_test,
)
from .ipd import (
    CovariateSchema,
    IpdDataset,
    IpdRecord,
    arm_counts,
    load_ipd,
    save_ipd,
)
from .meta import (
    MetaSummary,
    forest_rows,
    pool_matrix,
    pool_row,
)
from .simlab import (
    GENERIC,
    Analysis,
    OracleTruth,
    SettingConfig,
    SimulationReport,
    analysis_preset,
    generate_setting,
    preset_config,
    run_study,
    true_values_oracle,
    write_csv,
)
from .transport import (
    IPW,
    IPW_STABILIZED,
    OCR,
    POSITIVITY_THRESHOLD,
    CommonControlReport,
    EffectEstimate,
    EffectMatrix,
    StandardizedEstimate,
    WeightDiagnostics,
    common_control_check,
    density_ratio_weights,
    effect,
    effect_matrix,
    ipw_standardized_prob,
    ocr_standardized_prob,
    standardized_grid,
)
from .variance import (
    CovarianceResult,
    EstimatingSystem,
    attach_covariance,
    bootstrap_cov,
    build_system,
    sandwich_cov,
)

__version__ = "0.1.0"

__all__ = [
    "AllSameResponse",
    "Analysis",
    "CasemixError",
    "CommonControlReport",
    "ConditionNumberWarning",
    "CovarianceResult",
    "CovariateSchema",
    "DimensionMismatch",
    "DivisionByZero",
    "EffectEstimate",
    "EffectMatrix",
    "EmptyArm",
    "EmptyDataset",
    "EmptyTarget",
    "EstimatingSystem",
    "FittedLogistic",
    "FittedMultinomial",
    "GENERIC",
    "IPW",
    "IPW_STABILIZED",
    "IpdDataset",
    "IpdRecord",
    "MetaSummary",
    "MissingColumn",
    "ModelFormula",
    "NoConvergence",
    "NoEstimableInputs",
    "NonBinaryValue",
    "NonNumericCovariate",
    "OCR",
    "OracleTruth",
    "POSITIVITY_THRESHOLD",
    "PositivityWarning",
    "RAW",
    "RankDeficient",
    "SeparationWarning",
    "SettingConfig",
    "SimulationReport",
    "SingleArmStudy",
    "SingularBread",
    "SingularContrastCovariance",
    "StandardizedEstimate",
    "TRANSFORMED",
    "TooManyFailedReplicates",
    "UndefinedMeasure",
    "UnknownReference",
    "UnknownStudy",
    "WaldTestResult",
    "WeightDiagnostics",
    "all_tests",
    "analysis_preset",
    "arm_counts",
    "attach_covariance",
    "backward_eliminate",
    "beyond_casemix_test",
    "bootstrap_cov",
    "build_system",
    "casemix_test",
    "common_control_check",
    "conventional_test",
    "density_ratio_weights",
    "effect",
    "effect_matrix",
    "fit_logistic",
    "fit_multinomial",
    "forest_rows",
    "generate_setting",
    "ipw_standardized_prob",
    "load_ipd",
    "ocr_standardized_prob",
    "parse",
    "pool_matrix",
    "pool_row",
    "predict_prob",
    "preset_config",
    "report_records",
    "run_study",
    "sandwich_cov",
    "save_ipd",
    "standardized_grid",
    "true_values_oracle",
    "wald_test",
    "write_csv",
]
