//! Cross-method aggregation: one (reward, cost) trade-off row per method,
//! aggregated over its seeds.

use crate::error::{Error, Result};

/// One method's aggregate: mean ± population std over its per-run episodic
/// reward and cost means.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub method: String,
    pub runs: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
}

/// Aggregates per-run (mean reward, mean cost) pairs into one row per
/// method. Every method needs at least one run; values must be finite.
pub fn pareto_rows(groups: &[(String, Vec<(f64, f64)>)]) -> Result<Vec<ParetoRow>> {
    let mut rows = Vec::with_capacity(groups.len());
    for (method, runs) in groups {
        if runs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "method {method} has no runs to aggregate"
            )));
        }
        if runs.iter().any(|(r, c)| !r.is_finite() || !c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "method {method} has non-finite run statistics"
            )));
        }
        let n = runs.len() as f64;
        let mean_reward = runs.iter().map(|(r, _)| r).sum::<f64>() / n;
        let mean_cost = runs.iter().map(|(_, c)| c).sum::<f64>() / n;
        let var_reward =
            runs.iter().map(|(r, _)| (r - mean_reward) * (r - mean_reward)).sum::<f64>() / n;
        let var_cost =
            runs.iter().map(|(_, c)| (c - mean_cost) * (c - mean_cost)).sum::<f64>() / n;
        rows.push(ParetoRow {
            method: method.clone(),
            runs: runs.len(),
            mean_reward,
            std_reward: var_reward.sqrt(),
            mean_cost,
            std_cost: var_cost.sqrt(),
        });
    }
    Ok(rows)
}
