"""Small area estimation with calibrated mixed effects random forests.

Area means are estimated from unit-level survey data when only aggregate
covariate means are known for the population. A random-intercept mixed
effects random forest supplies unit-level predictions; empirical
likelihood weights calibrate each area's sample to its census means.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND
from .bootstrap import (BootstrapConfig, MseReport, ResidualDecomposition,
                        decompose_residuals, run_bootstrap)
from .calibration import (CalibrationResult, ElConfig, ELInfeasible, Provenance,
                          calibrate_all, calibrate_area, solve_el_weights)
from .data import AggregateTable, OutOfSampleError, PopulationDataset, SurveyDataset
from .estimators import (AreaEstimate, EstimatorTag, estimate_area_cdf,
                         estimate_area_quantile, estimate_bhf, estimate_direct,
                         estimate_merf_agg, estimate_merf_agg_smear, estimate_merf_ind,
                         fit_bhf)
from .forest import Forest, ForestConfig, fit_forest, predict, predict_oob
from .merf import FittedMerf, MerfConfig, fit_merf

__all__ = [
    "BACKEND", "AggregateTable", "AreaEstimate", "BootstrapConfig", "CalibrationResult",
    "ELInfeasible", "ElConfig", "EstimatorTag", "FittedMerf", "Forest", "ForestConfig",
    "MerfConfig", "MseReport", "OutOfSampleError", "PopulationDataset", "Provenance",
    "ResidualDecomposition", "SurveyDataset", "calibrate_all", "calibrate_area",
    "decompose_residuals", "estimate_area_cdf", "estimate_area_quantile", "estimate_bhf",
    "estimate_direct", "estimate_merf_agg", "estimate_merf_agg_smear", "estimate_merf_ind",
    "fit_bhf", "fit_forest", "fit_merf", "predict", "predict_oob", "run_bootstrap",
    "solve_el_weights",
]
