//! 2-D goal navigation with circular hazards.
//!
//! The agent is a point in a square arena of half-width `arena_half_width`.
//! Each step it moves by `clip(action, [-1, 1]) · max_speed` and is clamped
//! to the arena. Rewards shape progress toward the goal,
//! `shaping_coef · (d_prev − d_now)`, plus `goal_bonus` on reaching the goal
//! disc; the safety signal charges `contact_cost` per hazard whose disc
//! contains the agent, per step (overlapping contacts stack).
//!
//! Layouts (hazards, goal, start) are rebuilt on every `reset(seed)` by
//! rejection sampling with a mutual-clearance constraint and a bounded retry
//! budget, so hazards never overlap each other, the goal, or the start.

use super::{check_action, clip, CmdpSpec, StepOutcome};
use crate::error::{Error, Result};
use crate::rng;
use serde::{Deserialize, Serialize};

/// Geometry and reward/cost constants for the point-goal task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointGoalConfig {
    pub arena_half_width: f64,
    pub hazard_count: usize,
    pub hazard_radius: f64,
    pub goal_radius: f64,
    pub contact_cost: f64,
    pub shaping_coef: f64,
    pub goal_bonus: f64,
    pub max_speed: f64,
    /// Minimum extra gap between placed entities, beyond the sum of radii.
    pub placement_clearance: f64,
    /// Rejection-sampling attempts per entity before giving up.
    pub placement_retries: usize,
}

impl Default for PointGoalConfig {
    fn default() -> Self {
        PointGoalConfig {
            arena_half_width: 2.0,
            hazard_count: 5,
            hazard_radius: 0.25,
            goal_radius: 0.3,
            contact_cost: 0.2,
            shaping_coef: 1.0,
            goal_bonus: 5.0,
            max_speed: 0.1,
            placement_clearance: 0.1,
            placement_retries: 1000,
        }
    }
}

impl PointGoalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("arena_half_width", self.arena_half_width),
            ("hazard_radius", self.hazard_radius),
            ("goal_radius", self.goal_radius),
            ("max_speed", self.max_speed),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "point_goal.{name} must be positive and finite, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("contact_cost", self.contact_cost),
            ("shaping_coef", self.shaping_coef),
            ("goal_bonus", self.goal_bonus),
            ("placement_clearance", self.placement_clearance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "point_goal.{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        if self.hazard_radius >= self.arena_half_width
            || self.goal_radius >= self.arena_half_width
        {
            return Err(Error::Config(
                "point_goal radii must be smaller than the arena half-width".into(),
            ));
        }
        if self.placement_retries == 0 {
            return Err(Error::Config(
                "point_goal.placement_retries must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Observation layout: agent position (2), goal-relative vector (2), and
    /// one hazard-relative vector (2) per hazard, in placement order.
    pub fn obs_dim(&self) -> usize {
        4 + 2 * self.hazard_count
    }
}

#[derive(Debug, Clone)]
pub struct PointGoalEnv {
    cfg: PointGoalConfig,
    spec: CmdpSpec,
    hazards: Vec<[f64; 2]>,
    goal: [f64; 2],
    pos: [f64; 2],
    last_goal_dist: f64,
    t: usize,
    done: bool,
    initialized: bool,
}

impl PointGoalEnv {
    pub fn new(cfg: PointGoalConfig, discount: f64, horizon: usize, cost_budget: f64) -> Result<Self> {
        cfg.validate()?;
        let spec = CmdpSpec {
            obs_dim: cfg.obs_dim(),
            action_dim: 2,
            discount,
            horizon,
            cost_budget,
        };
        Ok(PointGoalEnv {
            cfg,
            spec,
            hazards: Vec::new(),
            goal: [0.0, 0.0],
            pos: [0.0, 0.0],
            last_goal_dist: 0.0,
            t: 0,
            done: true,
            initialized: false,
        })
    }

    pub fn spec(&self) -> &CmdpSpec {
        &self.spec
    }

    pub fn config(&self) -> &PointGoalConfig {
        &self.cfg
    }

    pub fn hazards(&self) -> &[[f64; 2]] {
        &self.hazards
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    /// Rebuild the layout from `layout_seed` and return the first observation.
    ///
    /// Placement order: hazards, then goal, then start. Every pair of placed
    /// entities keeps `sum of radii + placement_clearance` of separation (the
    /// start counts as radius zero), and hazards/goal lie fully inside the
    /// arena. Exceeding the retry budget is a configuration error.
    pub fn reset(&mut self, layout_seed: u64) -> Result<Vec<f64>> {
        let mut rng = rng::substream(layout_seed, "point-goal-layout");
        let hw = self.cfg.arena_half_width;
        let hr = self.cfg.hazard_radius;
        let gr = self.cfg.goal_radius;
        let gap = self.cfg.placement_clearance;

        let mut hazards: Vec<[f64; 2]> = Vec::with_capacity(self.cfg.hazard_count);
        for k in 0..self.cfg.hazard_count {
            let bound = hw - hr;
            let mut placed = false;
            for _ in 0..self.cfg.placement_retries {
                let cand = [
                    rng::uniform_range(&mut rng, -bound, bound),
                    rng::uniform_range(&mut rng, -bound, bound),
                ];
                if hazards
                    .iter()
                    .all(|h| dist(*h, cand) >= 2.0 * hr + gap)
                {
                    hazards.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Config(format!(
                    "could not place hazard {k} within {} retries; arena too crowded",
                    self.cfg.placement_retries
                )));
            }
        }

        let goal_bound = hw - gr;
        let mut goal = None;
        for _ in 0..self.cfg.placement_retries {
            let cand = [
                rng::uniform_range(&mut rng, -goal_bound, goal_bound),
                rng::uniform_range(&mut rng, -goal_bound, goal_bound),
            ];
            if hazards.iter().all(|h| dist(*h, cand) >= hr + gr + gap) {
                goal = Some(cand);
                break;
            }
        }
        let goal = goal.ok_or_else(|| {
            Error::Config(format!(
                "could not place goal within {} retries; arena too crowded",
                self.cfg.placement_retries
            ))
        })?;

        let mut start = None;
        for _ in 0..self.cfg.placement_retries {
            let cand = [
                rng::uniform_range(&mut rng, -hw, hw),
                rng::uniform_range(&mut rng, -hw, hw),
            ];
            let clear_of_hazards = hazards.iter().all(|h| dist(*h, cand) >= hr + gap);
            let outside_goal = dist(goal, cand) >= gr + gap;
            if clear_of_hazards && outside_goal {
                start = Some(cand);
                break;
            }
        }
        let start = start.ok_or_else(|| {
            Error::Config(format!(
                "could not place start within {} retries; arena too crowded",
                self.cfg.placement_retries
            ))
        })?;

        self.hazards = hazards;
        self.goal = goal;
        self.pos = start;
        self.last_goal_dist = dist(start, goal);
        self.t = 0;
        self.done = false;
        self.initialized = true;
        Ok(self.observation_at(self.pos))
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
        check_action(action, 2)?;

        let hw = self.cfg.arena_half_width;
        let vx = clip(action[0], -1.0, 1.0) * self.cfg.max_speed;
        let vy = clip(action[1], -1.0, 1.0) * self.cfg.max_speed;
        self.pos[0] = clip(self.pos[0] + vx, -hw, hw);
        self.pos[1] = clip(self.pos[1] + vy, -hw, hw);
        self.t += 1;

        let d_now = dist(self.pos, self.goal);
        let success = d_now <= self.cfg.goal_radius;
        let mut reward = self.cfg.shaping_coef * (self.last_goal_dist - d_now);
        if success {
            reward += self.cfg.goal_bonus;
        }
        self.last_goal_dist = d_now;

        let contacts = self
            .hazards
            .iter()
            .filter(|h| dist(**h, self.pos) <= self.cfg.hazard_radius)
            .count();
        let cost = self.cfg.contact_cost * contacts as f64;

        let terminal = success || self.t >= self.spec.horizon;
        self.done = terminal;
        Ok(StepOutcome {
            obs: self.observation_at(self.pos),
            reward,
            cost,
            terminal,
            success,
        })
    }

    /// Observation the agent would see standing at `pos` under the current
    /// layout. Also used to synthesize observations for cost-map probes.
    pub fn observation_at(&self, pos: [f64; 2]) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.spec.obs_dim);
        obs.push(pos[0]);
        obs.push(pos[1]);
        obs.push(self.goal[0] - pos[0]);
        obs.push(self.goal[1] - pos[1]);
        for h in &self.hazards {
            obs.push(h[0] - pos[0]);
            obs.push(h[1] - pos[1]);
        }
        obs
    }

    /// Instantaneous contact cost at `pos` under the current layout.
    pub fn instantaneous_cost(&self, pos: [f64; 2]) -> f64 {
        let contacts = self
            .hazards
            .iter()
            .filter(|h| dist(**h, pos) <= self.cfg.hazard_radius)
            .count();
        self.cfg.contact_cost * contacts as f64
    }

    /// Rasterized ground-truth cost field: `resolution × resolution` cell
    /// centers in row-major order (y outer, x inner), each holding the
    /// instantaneous contact cost at that point.
    pub fn ground_truth_cost_field(&self, resolution: usize) -> Result<Vec<f64>> {
        if !self.initialized {
            return Err(Error::State(
                "ground-truth field requires a layout; call reset first".into(),
            ));
        }
        if resolution == 0 {
            return Err(Error::InvalidInput("resolution must be positive".into()));
        }
        let hw = self.cfg.arena_half_width;
        let cell = 2.0 * hw / resolution as f64;
        let mut field = Vec::with_capacity(resolution * resolution);
        for iy in 0..resolution {
            let y = -hw + (iy as f64 + 0.5) * cell;
            for ix in 0..resolution {
                let x = -hw + (ix as f64 + 0.5) * cell;
                field.push(self.instantaneous_cost([x, y]));
            }
        }
        Ok(field)
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
