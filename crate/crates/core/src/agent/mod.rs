//! The safe actor loop: Ornstein–Uhlenbeck exploration noise, safety
//! screening of proposed actions, the Lagrangian actor objective, and the
//! per-episode dual-variable update.
//!
//! The actor minimizes
//!
//! ```text
//! L(θ_π) = E[ −Q_R(s, π(s)) + λ·Q_C(s, π(s)) + δ_kl·‖π(s) − π_old(s)‖² / (2σ²) ]
//! ```
//!
//! trading reward against predicted cost (weighted by the dual variable λ)
//! under a proximity penalty to the update-start policy. λ itself follows
//! the episodic rule `λ ← max(0, λ − η_λ·(χ − Ĉ))`, which raises the cost
//! penalty after episodes that exceed the budget χ and relaxes it otherwise.

mod trainer;

pub use trainer::{
    probe_dump as trainer_probe_dump, EpisodeRecord, RunCheckpoint, StepRecord, TraceEvent,
    Trainer, TrainOverrides, UpdatePhase, RUN_CHECKPOINT_VERSION,
};

use crate::diffnet::{
    backward_batch, forward_batch, forward_into, BatchWorkspace, Network, NetworkParameters,
    Workspace,
};
use crate::error::{Error, Result};
use crate::replay::{Minibatch, ReplayBuffer};
use crate::rng;
use rand_chacha::ChaCha8Rng;

/// Mean-reverting exploration noise: `x ← x + θ·(0 − x) + σ·N(0, I)`.
///
/// The long-run standard deviation of this recursion is
/// `σ/√(2θ − θ²)`, which the tests verify empirically.
#[derive(Debug, Clone)]
pub struct OUProcess {
    state: Vec<f64>,
    theta: f64,
    sigma: f64,
}

impl OUProcess {
    pub fn new(dim: usize, theta: f64, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("noise dimension must be at least 1".into()));
        }
        if !(theta > 0.0 && theta < 2.0) {
            return Err(Error::InvalidInput(format!(
                "mean-reversion rate must lie in (0, 2), got {theta}"
            )));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!("noise scale must be >= 0, got {sigma}")));
        }
        Ok(OUProcess {
            state: vec![0.0; dim],
            theta,
            sigma,
        })
    }

    /// Returns the state to the origin (called at episode boundaries).
    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Overrides the internal state (useful for probing the deterministic
    /// part of the recursion).
    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.state.len() {
            return Err(Error::InvalidInput("noise state dimension mismatch".into()));
        }
        self.state.copy_from_slice(state);
        Ok(())
    }

    /// Advances one step and returns the new noise vector.
    pub fn step(&mut self, rng_stream: &mut ChaCha8Rng) -> &[f64] {
        for x in &mut self.state {
            *x += self.theta * (0.0 - *x) + self.sigma * rng::normal(rng_stream);
        }
        &self.state
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }
}

/// Screening settings: the predicted-cost tolerance and the candidate pool.
#[derive(Debug, Clone, Copy)]
pub struct ScreenConfig {
    /// Proposals with predicted cost at or below this pass unmodified.
    pub eps_safe: f64,
    /// Number of perturbed candidates generated when the proposal fails.
    pub samples: usize,
    /// Scale of the one-shot noise perturbing each candidate.
    pub sigma: f64,
}

impl ScreenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_safe >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "safety tolerance must be >= 0, got {}",
                self.eps_safe
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidInput("screening needs at least one candidate".into()));
        }
        Ok(())
    }
}

/// Safety screening of a proposed action.
///
/// If the critic's predicted cost for the proposal is within tolerance it is
/// returned unchanged and the RNG is untouched. Otherwise `samples`
/// candidates — the proposal plus fresh zero-mean noise, clipped to the
/// action cube — are evaluated and the evaluated action with the lowest
/// predicted cost wins (the proposal competes too; ties keep the earliest).
pub fn screen_action(
    obs: &[f64],
    proposal: &[f64],
    safety: &Network,
    cfg: &ScreenConfig,
    rng_stream: &mut ChaCha8Rng,
    ws: &mut Workspace,
    input_buf: &mut [f64],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = proposal.len();
    if input_buf.len() != obs.len() + m {
        return Err(Error::InvalidInput("screening input buffer has the wrong length".into()));
    }
    input_buf[..obs.len()].copy_from_slice(obs);
    input_buf[obs.len()..].copy_from_slice(proposal);
    forward_into(&safety.spec, &safety.params, input_buf, ws)?;
    let proposal_cost = ws.output()[0];
    if proposal_cost <= cfg.eps_safe {
        return Ok(proposal.to_vec());
    }
    let mut best = proposal.to_vec();
    let mut best_cost = proposal_cost;
    let mut candidate = vec![0.0; m];
    for _ in 0..cfg.samples {
        for (c, &p) in candidate.iter_mut().zip(proposal.iter()) {
            *c = (p + cfg.sigma * rng::normal(rng_stream)).clamp(-1.0, 1.0);
        }
        input_buf[obs.len()..].copy_from_slice(&candidate);
        forward_into(&safety.spec, &safety.params, input_buf, ws)?;
        let cost = ws.output()[0];
        if cost < best_cost {
            best_cost = cost;
            best.copy_from_slice(&candidate);
        }
    }
    Ok(best)
}

/// Reusable buffers for the actor loss.
///
/// The loss runs in batched phases (stage inputs, one batched forward per
/// network role, per-sample scalar math, one batched backward per role), so
/// this holds a [`BatchWorkspace`] per role plus flat staging buffers.
#[derive(Debug)]
pub struct ActorScratch {
    actor_bws: BatchWorkspace,
    old_bws: BatchWorkspace,
    critic_bws: BatchWorkspace,
    in_states: Vec<f64>,
    in_sa: Vec<f64>,
    actions: Vec<f64>,
    q_reward: Vec<f64>,
    q_cost: Vec<f64>,
    kl_sq: Vec<f64>,
    ones: Vec<f64>,
    input_grads: Vec<f64>,
    cot_actions: Vec<f64>,
}

impl ActorScratch {
    pub fn new(
        actor_spec: &crate::diffnet::NetworkSpec,
        critic_spec: &crate::diffnet::NetworkSpec,
    ) -> Self {
        ActorScratch {
            actor_bws: BatchWorkspace::for_spec(actor_spec),
            old_bws: BatchWorkspace::for_spec(actor_spec),
            critic_bws: BatchWorkspace::for_spec(critic_spec),
            in_states: Vec::new(),
            in_sa: Vec::new(),
            actions: Vec::new(),
            q_reward: Vec::new(),
            q_cost: Vec::new(),
            kl_sq: Vec::new(),
            ones: Vec::new(),
            input_grads: Vec::new(),
            cot_actions: Vec::new(),
        }
    }
}

/// Value and gradient output of [`actor_loss`].
#[derive(Debug, Clone)]
pub struct ActorLossOutput {
    pub loss: f64,
    /// Flat gradient with respect to the actor parameters.
    pub grad: Vec<f64>,
}

/// The Lagrangian actor objective over a minibatch of states.
///
/// With `safety` absent the cost term vanishes (the unconstrained
/// baseline); `lambda = 0` and `kl_coef = 0` likewise reduce the loss to
/// `−mean Q_R(s, π(s))`. Gradients flow through the actor only — both
/// critics are treated as fixed functions of the action.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    batch: &Minibatch,
    buffer: &ReplayBuffer,
    actor: &Network,
    reward: &Network,
    safety: Option<&Network>,
    lambda: f64,
    kl_coef: f64,
    kl_sigma: f64,
    pi_old: &NetworkParameters,
    scratch: &mut ActorScratch,
) -> Result<ActorLossOutput> {
    let b = batch.indices.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty minibatch".into()));
    }
    if !(kl_sigma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "policy spread must be positive, got {kl_sigma}"
        )));
    }
    let inv_b = 1.0 / b as f64;
    let inv_var = 1.0 / (kl_sigma * kl_sigma);
    let m = actor.spec.output_dim();
    let state_dim = buffer.state_dim();
    let in_dim = reward.spec.input_dim();

    // Stage states and run the actor over the whole batch (activations
    // retained for the final backward pass).
    scratch.in_states.clear();
    for &idx in &batch.indices {
        scratch.in_states.extend_from_slice(&buffer.get(idx).state);
    }
    let actions = forward_batch(
        &actor.spec,
        &actor.params,
        &scratch.in_states,
        b,
        &mut scratch.actor_bws,
    )?;
    scratch.actions.clear();
    scratch.actions.extend_from_slice(actions);

    // (state ‖ π(state)) rows feed both critics.
    scratch.in_sa.clear();
    for i in 0..b {
        scratch
            .in_sa
            .extend_from_slice(&scratch.in_states[i * state_dim..(i + 1) * state_dim]);
        scratch
            .in_sa
            .extend_from_slice(&scratch.actions[i * m..(i + 1) * m]);
    }
    scratch.ones.clear();
    scratch.ones.resize(b, 1.0);
    scratch.input_grads.clear();
    scratch.input_grads.resize(b * in_dim, 0.0);
    scratch.cot_actions.clear();
    scratch.cot_actions.resize(b * m, 0.0);

    // Reward term: −Q_R(s, π(s)); ∂Q_R/∂a feeds the action cotangents.
    let q_r = forward_batch(
        &reward.spec,
        &reward.params,
        &scratch.in_sa,
        b,
        &mut scratch.critic_bws,
    )?;
    scratch.q_reward.clear();
    scratch.q_reward.extend_from_slice(q_r);
    backward_batch(
        &reward.spec,
        &reward.params,
        &mut scratch.critic_bws,
        &scratch.ones,
        None,
        Some(&mut scratch.input_grads),
    )?;
    for i in 0..b {
        for d in 0..m {
            scratch.cot_actions[i * m + d] = -inv_b * scratch.input_grads[i * in_dim + state_dim + d];
        }
    }

    // Cost term: +λ·Q_C(s, π(s)).
    if let Some(safety_net) = safety {
        let q_c = forward_batch(
            &safety_net.spec,
            &safety_net.params,
            &scratch.in_sa,
            b,
            &mut scratch.critic_bws,
        )?;
        scratch.q_cost.clear();
        scratch.q_cost.extend_from_slice(q_c);
        backward_batch(
            &safety_net.spec,
            &safety_net.params,
            &mut scratch.critic_bws,
            &scratch.ones,
            None,
            Some(&mut scratch.input_grads),
        )?;
        for i in 0..b {
            for d in 0..m {
                scratch.cot_actions[i * m + d] +=
                    lambda * inv_b * scratch.input_grads[i * in_dim + state_dim + d];
            }
        }
    }

    // Proximity term: δ_kl·‖π(s) − π_old(s)‖²/(2σ²).
    if kl_coef != 0.0 {
        let old_actions = forward_batch(
            &actor.spec,
            pi_old,
            &scratch.in_states,
            b,
            &mut scratch.old_bws,
        )?;
        scratch.kl_sq.clear();
        for i in 0..b {
            let mut sq = 0.0;
            for d in 0..m {
                let delta = scratch.actions[i * m + d] - old_actions[i * m + d];
                sq += delta * delta;
                scratch.cot_actions[i * m + d] += kl_coef * inv_var * delta * inv_b;
            }
            scratch.kl_sq.push(sq);
        }
    }

    // Accumulate the loss in per-sample term order (reward, cost, proximity).
    let mut loss = 0.0;
    for i in 0..b {
        loss += -scratch.q_reward[i] * inv_b;
        if safety.is_some() {
            loss += lambda * scratch.q_cost[i] * inv_b;
        }
        if kl_coef != 0.0 {
            loss += kl_coef * scratch.kl_sq[i] * 0.5 * inv_var * inv_b;
        }
    }

    let mut grad = vec![0.0; actor.spec.param_count()];
    backward_batch(
        &actor.spec,
        &actor.params,
        &mut scratch.actor_bws,
        &scratch.cot_actions,
        Some(&mut grad),
        None,
    )?;
    Ok(ActorLossOutput { loss, grad })
}

/// The Lagrange multiplier on the episodic cost budget, with its in-episode
/// cost accumulator.
#[derive(Debug, Clone, Copy)]
pub struct DualState {
    lambda: f64,
    lr: f64,
    budget: f64,
    episode_cost: f64,
}

impl DualState {
    pub fn new(lambda_init: f64, lr: f64, budget: f64) -> Result<Self> {
        if !(lambda_init >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "initial multiplier must be >= 0, got {lambda_init}"
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidInput(format!("dual learning rate must be positive, got {lr}")));
        }
        if !(budget >= 0.0) {
            return Err(Error::InvalidInput(format!("budget must be >= 0, got {budget}")));
        }
        Ok(DualState {
            lambda: lambda_init,
            lr,
            budget,
            episode_cost: 0.0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn episode_cost(&self) -> f64 {
        self.episode_cost
    }

    /// Adds one step's cost to the episode accumulator.
    pub fn accumulate(&mut self, cost: f64) {
        self.episode_cost += cost;
    }

    /// `λ ← max(0, λ − η_λ·(χ − Ĉ))`, then resets the accumulator. Returns
    /// the updated multiplier.
    pub fn end_episode(&mut self) -> f64 {
        self.lambda = (self.lambda - self.lr * (self.budget - self.episode_cost)).max(0.0);
        self.episode_cost = 0.0;
        self.lambda
    }
}
