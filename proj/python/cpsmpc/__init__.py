"""Distribution-free stochastic MPC.

Conformal calibration of joint-in-time confidence regions for error
trajectories, exact polytope-minus-ellipsoid constraint tightening, and
closed-loop Monte Carlo evaluation of the resulting controllers.
"""

from ._core import (
    CalibrationError,
    ConfidenceRegion,
    ConfigError,
    DataError,
    Ellipsoid,
    ErrorTrajectorySet,
    HalfspacePolytope,
    InitialInfeasibleError,
    LtiSystem,
    TightenResult,
    TrajectoryDataset,
    calibrate,
    calibrate_config,
    chi2_quantile,
    conformal_quantile,
    evaluate_config,
    generate_gaussian,
    generate_uniform,
    load_dataset,
    load_region,
    pac_tighten,
    propagate_output_errors,
    propagate_state_errors,
    save_dataset,
    save_region,
    support,
    tighten,
    tighten_inputs,
    union_bound_levels,
)

__all__ = [
    "CalibrationError",
    "ConfidenceRegion",
    "ConfigError",
    "DataError",
    "Ellipsoid",
    "ErrorTrajectorySet",
    "HalfspacePolytope",
    "InitialInfeasibleError",
    "LtiSystem",
    "TightenResult",
    "TrajectoryDataset",
    "calibrate",
    "calibrate_config",
    "chi2_quantile",
    "conformal_quantile",
    "evaluate_config",
    "generate_gaussian",
    "generate_uniform",
    "load_dataset",
    "load_region",
    "pac_tighten",
    "propagate_output_errors",
    "propagate_state_errors",
    "save_dataset",
    "save_region",
    "support",
    "tighten",
    "tighten_inputs",
    "union_bound_levels",
]
