"""conformal_kit public API
Weighted conformal quantiles, the method catalogue, model selection, graph and
hierarchical calibration, and the simulation drivers."""

__version__ = "0.1.0"

from .calib_core import build_prediction_region, conformal_p_value, weighted_quantile
from .common import CalibrationSet, Level, PredictionRegion, WeightedScoreSample
from .errors import (ConfigurationError, ConformalKitError, ConvergenceError,
                     DegenerateNeighborhoodError, DomainError, ExperimentError,
                     NumericalError, SelectionError, UnsupportedError)
from .estimators import (BasisSpec, ConditionalCdf, GroupAdjustment,
                         PinballModel, conditional_cdf_eval, fit_batchgcp,
                         fit_mean_model, fit_pinball_qr, pinball_loss,
                         predict_quantile)
from .graph import (CommunityAssignment, GraphData, community_rank_score,
                    detect_communities, graphcp_region)
from .hier import BranchScoreKind, HierData, hierarchical_region
from .kernels import (KernelFamily, KernelSpec, bandwidth_for_target_neff,
                      estimate_effective_sample_size, kernel_eval,
                      sample_auxiliary_covariate)
from .methods import (CalibrationMode, FittedComponents, Method, PredictorSpec,
                      ScoreSpec, WeightSpec, make_predictor)
from .selection import (CandidatePool, SelectionRule, efficient_selected_region,
                        exact_selected_region, localized_el_loss, select,
                        zeta_residual)
from .simulate import (CoverageConfig, DgpSpec, MetricsTable, SbmSpec,
                       analytic_conditional_coverage, density_ratio,
                       generate_dgp, generate_sbm_graph,
                       run_coverage_experiment)

__all__ = [
    "__version__",
    "weighted_quantile",
    "build_prediction_region",
    "conformal_p_value",
    "Level",
    "WeightedScoreSample",
    "PredictionRegion",
    "CalibrationSet",
    "ConformalKitError",
    "ConfigurationError",
    "DomainError",
    "DegenerateNeighborhoodError",
    "NumericalError",
    "ConvergenceError",
    "SelectionError",
    "UnsupportedError",
    "ExperimentError",
    "BasisSpec",
    "PinballModel",
    "ConditionalCdf",
    "GroupAdjustment",
    "pinball_loss",
    "fit_pinball_qr",
    "predict_quantile",
    "fit_mean_model",
    "conditional_cdf_eval",
    "fit_batchgcp",
    "KernelFamily",
    "KernelSpec",
    "kernel_eval",
    "sample_auxiliary_covariate",
    "estimate_effective_sample_size",
    "bandwidth_for_target_neff",
    "Method",
    "CalibrationMode",
    "ScoreSpec",
    "WeightSpec",
    "PredictorSpec",
    "FittedComponents",
    "make_predictor",
    "SelectionRule",
    "CandidatePool",
    "zeta_residual",
    "localized_el_loss",
    "select",
    "efficient_selected_region",
    "exact_selected_region",
    "GraphData",
    "CommunityAssignment",
    "detect_communities",
    "community_rank_score",
    "graphcp_region",
    "HierData",
    "BranchScoreKind",
    "hierarchical_region",
    "DgpSpec",
    "SbmSpec",
    "MetricsTable",
    "CoverageConfig",
    "generate_dgp",
    "density_ratio",
    "analytic_conditional_coverage",
    "run_coverage_experiment",
    "generate_sbm_graph",
]
