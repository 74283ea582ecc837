"""Random-effects handling of missing covariates and responses in linear mixed models."""

from .completion import (CompletedDesign, RandomEffectsSpec, build_completed_design,
                         partition_by_response)
from .data import (CovariateSpec, LongitudinalDataset, MissingPattern, complete_records,
                   load_csv, missing_pattern, write_csv)
from .engine import (FitResult, LmmProblem, OptimizerOptions, VarianceComponents, assemble_v,
                     fixed_psi_fit, gls, reml_fit)
from .errors import (ConfigError, InfeasibleError, NumericalError, ParseError,
                     RankDeficiencyError, RelmmError, ValidationError)
from .predictors import (CCE, CCPE, CDOE, FULL, EstimatorReport, PredictionResult,
                         best_predictor, ebp, predictor_matrix, run_pipeline, run_pipelines)
from .simulation import McReport, SimConfig, preset, run_monte_carlo
from .theory import (EfficiencyReport, quadratic_form_expansion_check, sigma_cce, sigma_cdoe,
                     ytilde_singularity_check)

__version__ = "0.1.0"

__all__ = [
    "CompletedDesign", "RandomEffectsSpec", "build_completed_design", "partition_by_response",
    "CovariateSpec", "LongitudinalDataset", "MissingPattern", "complete_records", "load_csv",
    "missing_pattern", "write_csv",
    "FitResult", "LmmProblem", "OptimizerOptions", "VarianceComponents", "assemble_v",
    "fixed_psi_fit", "gls", "reml_fit",
    "ConfigError", "InfeasibleError", "NumericalError", "ParseError", "RankDeficiencyError",
    "RelmmError", "ValidationError",
    "CCE", "CCPE", "CDOE", "FULL", "EstimatorReport", "PredictionResult", "best_predictor", "ebp",
    "predictor_matrix", "run_pipeline", "run_pipelines",
    "McReport", "SimConfig", "preset", "run_monte_carlo",
    "EfficiencyReport", "quadratic_form_expansion_check", "sigma_cce", "sigma_cdoe",
    "ytilde_singularity_check",
]
