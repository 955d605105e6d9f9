//! Run configuration: a single JSON document with nested sections, where
//! every field has a default and unknown keys are rejected. The resolved
//! configuration hashes to a short digest used in run-directory names, so a
//! directory name changes exactly when some resolved field changes.

use crate::critics::CriticKind;
use crate::envs::{Env, EnvFamily, PointGoalConfig, PointGoalEnv, VelocityLimitConfig, VelocityLimitEnv};
use crate::error::{Error, Result};
use crate::uncertainty::{auto_scope, InfluenceScope};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which agent a run trains. The four safety-aware kinds share the
/// Lagrangian loop and differ only in the safety-critic objective;
/// `Ddpg` is the unconstrained baseline with no safety stack at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ddpg,
    Sc,
    Csc,
    Usc,
    UscNr,
}

impl AgentKind {
    /// The safety-critic training rule, when this kind has a safety critic.
    pub fn critic_kind(self) -> Option<CriticKind> {
        match self {
            AgentKind::Ddpg => None,
            AgentKind::Sc => Some(CriticKind::Sc),
            AgentKind::Csc => Some(CriticKind::Csc),
            AgentKind::Usc => Some(CriticKind::Usc),
            AgentKind::UscNr => Some(CriticKind::UscNr),
        }
    }

    pub fn uses_safety_stack(self) -> bool {
        self.critic_kind().is_some()
    }

    pub fn label(self) -> &'static str {
        match self {
            AgentKind::Ddpg => "ddpg",
            AgentKind::Sc => "sc",
            AgentKind::Csc => "csc",
            AgentKind::Usc => "usc",
            AgentKind::UscNr => "usc_nr",
        }
    }
}

/// Influence-scope selection: automatic by parameter count, or forced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeChoice {
    Auto,
    FullParameters,
    LastLayer,
}

impl ScopeChoice {
    pub fn resolve(self, param_count: usize) -> InfluenceScope {
        match self {
            ScopeChoice::Auto => auto_scope(param_count),
            ScopeChoice::FullParameters => InfluenceScope::FullParameters,
            ScopeChoice::LastLayer => InfluenceScope::LastLayer,
        }
    }
}

fn d_family() -> EnvFamily {
    EnvFamily::PointGoal
}
fn d_discount() -> f64 {
    0.95
}
fn d_horizon() -> usize {
    200
}
fn d_cost_budget() -> f64 {
    1.0
}

/// Environment section: task family, shared CMDP constants, and per-family
/// parameters (only the selected family's block is consulted).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub family: EnvFamily,
    pub discount: f64,
    pub horizon: usize,
    pub cost_budget: f64,
    pub point_goal: PointGoalConfig,
    pub velocity_limit: VelocityLimitConfig,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        EnvironmentConfig {
            family: d_family(),
            discount: d_discount(),
            horizon: d_horizon(),
            cost_budget: d_cost_budget(),
            point_goal: PointGoalConfig::default(),
            velocity_limit: VelocityLimitConfig::default(),
        }
    }
}

impl EnvironmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount >= 0.0 && self.discount < 1.0) {
            return Err(Error::Config(format!(
                "environment.discount must lie in [0, 1), got {}",
                self.discount
            )));
        }
        if self.horizon == 0 {
            return Err(Error::Config("environment.horizon must be at least 1".into()));
        }
        if !(self.cost_budget >= 0.0) || !self.cost_budget.is_finite() {
            return Err(Error::Config(format!(
                "environment.cost_budget must be finite and >= 0, got {}",
                self.cost_budget
            )));
        }
        self.point_goal.validate()?;
        self.velocity_limit.validate()?;
        Ok(())
    }

    /// Constructs the configured environment.
    pub fn build(&self) -> Result<Env> {
        Ok(match self.family {
            EnvFamily::PointGoal => Env::PointGoal(PointGoalEnv::new(
                self.point_goal.clone(),
                self.discount,
                self.horizon,
                self.cost_budget,
            )?),
            EnvFamily::VelocityLimit => Env::VelocityLimit(VelocityLimitEnv::new(
                self.velocity_limit.clone(),
                self.discount,
                self.horizon,
                self.cost_budget,
            )?),
        })
    }
}

fn d_kind() -> AgentKind {
    AgentKind::Usc
}
fn d_actor_lr() -> f64 {
    2e-3
}
fn d_critic_lr() -> f64 {
    1e-3
}
fn d_dual_lr() -> f64 {
    0.02
}
fn d_batch() -> usize {
    64
}
fn d_buffer() -> usize {
    200_000
}
fn d_tau() -> f64 {
    5e-3
}
fn d_ou_sigma() -> f64 {
    0.2
}
fn d_ou_theta() -> f64 {
    0.15
}
fn d_eps_safe() -> f64 {
    0.3
}
fn d_screen_samples() -> usize {
    16
}
fn d_gn_damping() -> f64 {
    1e-6
}
fn d_scope() -> ScopeChoice {
    ScopeChoice::Auto
}
fn d_kl_coef() -> f64 {
    0.01
}
fn d_kl_sigma() -> f64 {
    0.1
}
fn d_n_alternatives() -> usize {
    10
}
fn d_eps_num() -> f64 {
    1e-8
}
fn d_refine_top_n() -> usize {
    4
}
fn d_refine_neighbours() -> usize {
    5
}
fn d_trust_coef() -> f64 {
    1.0
}
fn d_trust_epsilon() -> f64 {
    0.01
}
fn d_episodes() -> usize {
    300
}
fn d_warmup_multiplier() -> usize {
    10
}
fn d_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn d_lambda_init() -> f64 {
    1.0
}
fn d_checkpoint_every() -> usize {
    100
}

/// Agent section: learning rates, replay/exploration settings, the
/// conservative and refinement knobs, and the training length.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub actor_lr: f64,
    pub reward_critic_lr: f64,
    pub safety_critic_lr: f64,
    pub dual_lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub tau: f64,
    pub ou_sigma: f64,
    pub ou_theta: f64,
    pub eps_safe: f64,
    pub screen_samples: usize,
    pub gn_damping: f64,
    pub influence_scope: ScopeChoice,
    pub kl_coef: f64,
    pub kl_sigma: f64,
    pub n_alternatives: usize,
    pub eps_num: f64,
    pub refine_top_n: usize,
    pub refine_neighbours: usize,
    pub trust_coef: f64,
    pub trust_epsilon: f64,
    pub episodes: usize,
    pub warmup_multiplier: usize,
    pub hidden_sizes: Vec<usize>,
    pub lambda_init: f64,
    /// Checkpoint cadence in episodes; 0 disables periodic checkpoints
    /// (a final checkpoint is always written).
    pub checkpoint_every: usize,
    /// Also record per-step loss rows (larger output).
    pub step_csv: bool,
    /// Dump the replay buffer contents at the end of training.
    pub dump_replay: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            kind: d_kind(),
            actor_lr: d_actor_lr(),
            reward_critic_lr: d_critic_lr(),
            safety_critic_lr: d_critic_lr(),
            dual_lr: d_dual_lr(),
            batch_size: d_batch(),
            buffer_capacity: d_buffer(),
            tau: d_tau(),
            ou_sigma: d_ou_sigma(),
            ou_theta: d_ou_theta(),
            eps_safe: d_eps_safe(),
            screen_samples: d_screen_samples(),
            gn_damping: d_gn_damping(),
            influence_scope: d_scope(),
            kl_coef: d_kl_coef(),
            kl_sigma: d_kl_sigma(),
            n_alternatives: d_n_alternatives(),
            eps_num: d_eps_num(),
            refine_top_n: d_refine_top_n(),
            refine_neighbours: d_refine_neighbours(),
            trust_coef: d_trust_coef(),
            trust_epsilon: d_trust_epsilon(),
            episodes: d_episodes(),
            warmup_multiplier: d_warmup_multiplier(),
            hidden_sizes: d_hidden(),
            lambda_init: d_lambda_init(),
            checkpoint_every: d_checkpoint_every(),
            step_csv: false,
            dump_replay: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_rates: [(&str, f64); 4] = [
            ("agent.actor_lr", self.actor_lr),
            ("agent.reward_critic_lr", self.reward_critic_lr),
            ("agent.safety_critic_lr", self.safety_critic_lr),
            ("agent.dual_lr", self.dual_lr),
        ];
        for (name, v) in positive_rates {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("agent.batch_size must be at least 1".into()));
        }
        if self.buffer_capacity < self.batch_size {
            return Err(Error::Config(format!(
                "agent.buffer_capacity ({}) must be at least the batch size ({})",
                self.buffer_capacity, self.batch_size
            )));
        }
        if !(self.tau >= 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("agent.tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.ou_sigma >= 0.0) || !self.ou_sigma.is_finite() {
            return Err(Error::Config(format!("agent.ou_sigma must be >= 0, got {}", self.ou_sigma)));
        }
        if !(self.ou_theta > 0.0 && self.ou_theta < 2.0) {
            return Err(Error::Config(format!(
                "agent.ou_theta must lie in (0, 2) for a stationary noise process, got {}",
                self.ou_theta
            )));
        }
        if !(self.eps_safe >= 0.0) {
            return Err(Error::Config(format!("agent.eps_safe must be >= 0, got {}", self.eps_safe)));
        }
        if self.screen_samples == 0 {
            return Err(Error::Config("agent.screen_samples must be at least 1".into()));
        }
        if !(self.gn_damping > 0.0) {
            return Err(Error::Config(format!("agent.gn_damping must be positive, got {}", self.gn_damping)));
        }
        if !(self.kl_coef >= 0.0) {
            return Err(Error::Config(format!("agent.kl_coef must be >= 0, got {}", self.kl_coef)));
        }
        if !(self.kl_sigma > 0.0) {
            return Err(Error::Config(format!("agent.kl_sigma must be positive, got {}", self.kl_sigma)));
        }
        if self.n_alternatives == 0 {
            return Err(Error::Config("agent.n_alternatives must be at least 1".into()));
        }
        if !(self.eps_num > 0.0) {
            return Err(Error::Config(format!("agent.eps_num must be positive, got {}", self.eps_num)));
        }
        if self.refine_top_n == 0 {
            return Err(Error::Config("agent.refine_top_n must be at least 1".into()));
        }
        if self.refine_neighbours == 0 {
            return Err(Error::Config("agent.refine_neighbours must be at least 1".into()));
        }
        if !(self.trust_coef >= 0.0) {
            return Err(Error::Config(format!("agent.trust_coef must be >= 0, got {}", self.trust_coef)));
        }
        if !(self.trust_epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "agent.trust_epsilon must be >= 0, got {}",
                self.trust_epsilon
            )));
        }
        if self.warmup_multiplier == 0 {
            return Err(Error::Config("agent.warmup_multiplier must be at least 1".into()));
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config("agent.hidden_sizes entries must be at least 1".into()));
        }
        if !(self.lambda_init >= 0.0) {
            return Err(Error::Config(format!(
                "agent.lambda_init must be >= 0, got {}",
                self.lambda_init
            )));
        }
        Ok(())
    }

    /// Buffer fill level at which network updates begin.
    pub fn warmup_size(&self) -> usize {
        self.warmup_multiplier * self.batch_size
    }
}

fn d_eval_episodes() -> usize {
    10
}
fn d_costmap_resolution() -> usize {
    32
}
fn d_reliability_bins() -> usize {
    10
}

/// Evaluation section: deployment rollout count and report settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub costmap_resolution: usize,
    pub reliability_bins: usize,
    /// Evaluate map cells as the minimum over a fixed 8-direction action
    /// probe instead of the policy's own action.
    pub costmap_action_probe: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: d_eval_episodes(),
            costmap_resolution: d_costmap_resolution(),
            reliability_bins: d_reliability_bins(),
            costmap_action_probe: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.costmap_resolution == 0 {
            return Err(Error::Config("eval.costmap_resolution must be at least 1".into()));
        }
        if self.reliability_bins == 0 {
            return Err(Error::Config("eval.reliability_bins must be at least 1".into()));
        }
        Ok(())
    }
}

fn d_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn d_output_dir() -> String {
    "runs".into()
}

/// The full run configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub environment: EnvironmentConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            environment: EnvironmentConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            seeds: d_seeds(),
            output_dir: d_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.agent.validate()?;
        self.eval.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must contain at least one entry".into()));
        }
        if self.output_dir.is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Parses a configuration from JSON text; an effectively empty document
    /// resolves to all defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let trimmed = text.trim();
        let body = if trimmed.is_empty() { "{}" } else { trimmed };
        let cfg: RunConfig = serde_json::from_str(body).map_err(|e| {
            Error::Parse(format!(
                "configuration parse failure at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a configuration file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Short digest of the fully resolved configuration: the first 8 hex
    /// characters of the SHA-256 of its canonical serialization. Struct field
    /// order fixes the serialization, so the digest changes exactly when a
    /// resolved value changes.
    pub fn hash_prefix(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialization is infallible");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }
}
