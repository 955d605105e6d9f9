//! Toy constrained MDPs with kinematic point-mass dynamics.
//!
//! Two task families are provided:
//!
//! * [`point_goal::PointGoalEnv`] — navigate a 2-D arena to a goal region
//!   while avoiding circular hazards; each hazard in contact adds a fixed
//!   cost per step.
//! * [`velocity_limit::VelocityLimitEnv`] — drive along a line for
//!   displacement reward; speeding above a threshold incurs a unit cost.
//!
//! Episodes are deterministic functions of a layout seed: `reset(seed)`
//! rebuilds the layout by seeded rejection sampling and returns the first
//! observation. All dynamics are first-order (positions advance by clipped
//! action times a maximum speed), so ground-truth cost structure is known in
//! closed form and can be rasterized for evaluation.

pub mod point_goal;
pub mod velocity_limit;

pub use point_goal::{PointGoalConfig, PointGoalEnv};
pub use velocity_limit::{VelocityLimitConfig, VelocityLimitEnv};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Static description of a constrained MDP: dimensions, discount, horizon,
/// and the per-episode cost budget the dual variable enforces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmdpSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub discount: f64,
    pub horizon: usize,
    pub cost_budget: f64,
}

/// One transition's worth of environment feedback.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub terminal: bool,
    pub success: bool,
}

/// Which task family a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    PointGoal,
    VelocityLimit,
}

/// Runtime dispatch over the task families.
#[derive(Debug, Clone)]
pub enum Env {
    PointGoal(PointGoalEnv),
    VelocityLimit(VelocityLimitEnv),
}

impl Env {
    pub fn spec(&self) -> &CmdpSpec {
        match self {
            Env::PointGoal(e) => e.spec(),
            Env::VelocityLimit(e) => e.spec(),
        }
    }

    pub fn reset(&mut self, layout_seed: u64) -> Result<Vec<f64>> {
        match self {
            Env::PointGoal(e) => e.reset(layout_seed),
            Env::VelocityLimit(e) => e.reset(layout_seed),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        match self {
            Env::PointGoal(e) => e.step(action),
            Env::VelocityLimit(e) => e.step(action),
        }
    }

    /// The point-goal environment when this is one; capability error
    /// otherwise. Cost-map evaluation needs the 2-D arena geometry.
    pub fn as_point_goal(&self) -> Result<&PointGoalEnv> {
        match self {
            Env::PointGoal(e) => Ok(e),
            Env::VelocityLimit(_) => Err(Error::Capability(
                "cost maps require a 2-D arena; the velocity task has none".into(),
            )),
        }
    }
}

/// Shared validation for action vectors.
pub(crate) fn check_action(action: &[f64], dim: usize) -> Result<()> {
    if action.len() != dim {
        return Err(Error::InvalidInput(format!(
            "action has {} entries, environment expects {dim}",
            action.len()
        )));
    }
    if let Some(bad) = action.iter().find(|a| !a.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "action contains non-finite entry {bad}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn clip(v: f64, lo: f64, hi: f64) -> f64 {
    v.clamp(lo, hi)
}
