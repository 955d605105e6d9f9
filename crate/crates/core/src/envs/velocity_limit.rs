//! 1-D locomotion under a speed limit.
//!
//! The agent drives along a line; the action (1-D, clipped to `[-1, 1]`)
//! selects this step's velocity as a fraction of `max_speed`, and the reward
//! is the displacement achieved. Every step whose speed exceeds
//! `speed_threshold` incurs `violation_cost`. Reward and cost are therefore
//! in direct tension above the threshold, which is the point of the task.
//!
//! There is no goal region: episodes run for the full horizon and `success`
//! is always false. The layout seed only randomizes the starting position
//! (the task itself is translation-invariant; the offset keeps observations
//! from collapsing to a single point).

use super::{check_action, clip, CmdpSpec, StepOutcome};
use crate::error::{Error, Result};
use crate::rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityLimitConfig {
    pub max_speed: f64,
    /// Speeds strictly above this threshold incur the violation cost.
    pub speed_threshold: f64,
    pub violation_cost: f64,
    /// Half-width of the start-position randomization interval.
    pub start_spread: f64,
}

impl Default for VelocityLimitConfig {
    fn default() -> Self {
        VelocityLimitConfig {
            max_speed: 0.1,
            speed_threshold: 0.05,
            violation_cost: 1.0,
            start_spread: 1.0,
        }
    }
}

impl VelocityLimitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_speed > 0.0 && self.max_speed.is_finite()) {
            return Err(Error::Config(format!(
                "velocity_limit.max_speed must be positive and finite, got {}",
                self.max_speed
            )));
        }
        if !(self.speed_threshold >= 0.0 && self.speed_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "velocity_limit.speed_threshold must be non-negative, got {}",
                self.speed_threshold
            )));
        }
        if !(self.violation_cost >= 0.0 && self.violation_cost.is_finite()) {
            return Err(Error::Config(format!(
                "velocity_limit.violation_cost must be non-negative, got {}",
                self.violation_cost
            )));
        }
        if !(self.start_spread >= 0.0 && self.start_spread.is_finite()) {
            return Err(Error::Config(format!(
                "velocity_limit.start_spread must be non-negative, got {}",
                self.start_spread
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VelocityLimitEnv {
    cfg: VelocityLimitConfig,
    spec: CmdpSpec,
    x: f64,
    v: f64,
    t: usize,
    done: bool,
    initialized: bool,
}

impl VelocityLimitEnv {
    pub fn new(
        cfg: VelocityLimitConfig,
        discount: f64,
        horizon: usize,
        cost_budget: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = CmdpSpec {
            obs_dim: 2,
            action_dim: 1,
            discount,
            horizon,
            cost_budget,
        };
        Ok(VelocityLimitEnv {
            cfg,
            spec,
            x: 0.0,
            v: 0.0,
            t: 0,
            done: true,
            initialized: false,
        })
    }

    pub fn spec(&self) -> &CmdpSpec {
        &self.spec
    }

    pub fn config(&self) -> &VelocityLimitConfig {
        &self.cfg
    }

    pub fn reset(&mut self, layout_seed: u64) -> Result<Vec<f64>> {
        let mut rng = rng::substream(layout_seed, "velocity-limit-layout");
        self.x = rng::uniform_range(&mut rng, -self.cfg.start_spread, self.cfg.start_spread);
        self.v = 0.0;
        self.t = 0;
        self.done = false;
        self.initialized = true;
        Ok(vec![self.x, self.v])
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if !self.initialized {
            return Err(Error::Protocol("step called before reset".into()));
        }
        if self.done {
            return Err(Error::Protocol(
                "step called on a finished episode; call reset first".into(),
            ));
        }
        check_action(action, 1)?;

        self.v = clip(action[0], -1.0, 1.0) * self.cfg.max_speed;
        self.x += self.v;
        self.t += 1;

        let reward = self.v;
        let cost = if self.v.abs() > self.cfg.speed_threshold {
            self.cfg.violation_cost
        } else {
            0.0
        };
        let terminal = self.t >= self.spec.horizon;
        self.done = terminal;
        Ok(StepOutcome {
            obs: vec![self.x, self.v],
            reward,
            cost,
            terminal,
            success: false,
        })
    }
}
