//! Evaluation tooling: deployment rollouts, cost-map comparison metrics,
//! uncertainty calibration, tail-bound checks, and cross-method summaries.

pub mod calibration;
pub mod costmap;
pub mod deploy;
pub mod pareto;
pub mod theorem1;

pub use calibration::{
    collect_calibration, reliability_curve, risk_coverage, spearman, CalibrationData,
    ReliabilityBin, RiskCoveragePoint, CALIBRATION_REFERENCE_ROWS,
};
pub use costmap::{contrast_error, entropy_error, gradient_mse, predict_cost_map, CostMap, MapMetrics};
pub use deploy::{deploy_policy, DeployAggregate, DeployEpisode, DeployOutput, RolloutLog};
pub use pareto::{pareto_rows, ParetoRow};
pub use theorem1::{theorem1_check, TheoremConfig, TheoremOutput};
