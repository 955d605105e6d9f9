//! Temporal-difference losses for the reward critic and the safety critic.
//!
//! Both critics are scalar networks over concatenated `(state, action)`
//! inputs and train on one-step bootstrap targets computed through frozen
//! target networks (target actor for the next action, target critic for the
//! next value). The safety critic can additionally carry a *conservative*
//! penalty: for each sample, candidate actions are drawn uniformly from the
//! action cube and the penalty
//!
//! ```text
//! lse_penalty = log Σ_j exp((Q(s, a'_j) − μ) / (σ + ε)) − (Q(s, a) − μ) / (σ + ε)
//! ```
//!
//! pushes predicted cost *up* on unvisited actions relative to the visited
//! anchor. `μ` and `σ` are the batch mean and population standard deviation
//! of the anchor values, treated as normalization constants (gradients do
//! not flow through them). The per-sample penalty is weighted: uniformly
//! (weight 1) for the plain conservative critic, or by an
//! uncertainty-adjusted weight supplied by the caller. The total loss is
//!
//! ```text
//! L = mean_i [ ½·(Q(s_i,a_i) − y_i)² + ½·w_i·lse_penalty_i ]
//! ```
//!
//! which is linear in the weights — doubling every `w_i` exactly doubles the
//! conservative component while leaving the Bellman component untouched.

use crate::diffnet::{
    backward_batch, forward_batch, BatchWorkspace, Network, NetworkSpec,
};
use crate::error::{Error, Result};
use crate::replay::{Minibatch, ReplayBuffer};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which safety-critic training rule a run uses.
///
/// * `Sc` — Bellman loss only (no conservative term).
/// * `Csc` — conservative term with uniform weight 1 on every sample.
/// * `Usc` — conservative term with caller-supplied per-sample weights,
///   plus nearest-neighbour trust-region refinement in the training loop.
/// * `UscNr` — as `Usc` but the training loop skips refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    Sc,
    Csc,
    Usc,
    UscNr,
}

impl CriticKind {
    pub fn uses_conservative_term(self) -> bool {
        !matches!(self, CriticKind::Sc)
    }

    pub fn uses_influence(self) -> bool {
        matches!(self, CriticKind::Usc | CriticKind::UscNr)
    }

    pub fn uses_refinement(self) -> bool {
        matches!(self, CriticKind::Usc)
    }

    pub fn label(self) -> &'static str {
        match self {
            CriticKind::Sc => "sc",
            CriticKind::Csc => "csc",
            CriticKind::Usc => "usc",
            CriticKind::UscNr => "usc_nr",
        }
    }
}

/// Normalization constants for the conservative penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
}

impl BatchStats {
    #[inline]
    pub fn denom(&self) -> f64 {
        self.std + self.eps
    }

    #[inline]
    pub fn normalize(&self, q: f64) -> f64 {
        (q - self.mean) / self.denom()
    }
}

/// Batch mean and population standard deviation of `values`.
pub fn batch_stats(values: &[f64], eps: f64) -> Result<BatchStats> {
    if values.is_empty() {
        return Err(Error::InvalidInput("batch statistics need values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(BatchStats {
        mean,
        std: var.sqrt(),
        eps,
    })
}

/// One-step bootstrap target for the cost critic:
/// `c + γ · q_next` on non-terminal transitions, `c` on terminal ones.
#[inline]
pub fn bellman_cost_target(cost: f64, gamma: f64, q_next: f64, terminal: bool) -> f64 {
    if terminal {
        cost
    } else {
        cost + gamma * q_next
    }
}

/// Log-sum-exp penalty of normalized alternatives against the normalized
/// anchor, stabilized by shifting out the maximum before exponentiating.
///
/// In test builds the log-sum-exp sandwich
/// `max_j z_j ≤ LSE ≤ max_j z_j + log m` is asserted on every call.
pub fn lse_penalty(q_alternatives: &[f64], q_anchor: f64, stats: &BatchStats) -> Result<f64> {
    if q_alternatives.is_empty() {
        return Err(Error::InvalidInput(
            "lse penalty needs at least one alternative".into(),
        ));
    }
    let denom = stats.denom();
    if !(denom > 0.0) {
        return Err(Error::Numeric(format!(
            "normalization denominator must be positive, got {denom}"
        )));
    }
    let mut z_max = f64::NEG_INFINITY;
    for &q in q_alternatives {
        let z = (q - stats.mean) / denom;
        if z > z_max {
            z_max = z;
        }
    }
    let mut sum = 0.0;
    for &q in q_alternatives {
        sum += (((q - stats.mean) / denom) - z_max).exp();
    }
    let lse = z_max + sum.ln();
    debug_assert!(
        lse >= z_max - 1e-12 && lse <= z_max + (q_alternatives.len() as f64).ln() + 1e-12,
        "log-sum-exp left its sandwich: lse {lse}, max {z_max}, m {}",
        q_alternatives.len()
    );
    Ok(lse - stats.normalize(q_anchor))
}

/// Settings for the conservative penalty.
#[derive(Debug, Clone, Copy)]
pub struct ConservativeConfig {
    /// Number of uniform alternative actions per sample.
    pub n_alternatives: usize,
    /// Additive floor inside the normalization denominator.
    pub eps_num: f64,
}

impl Default for ConservativeConfig {
    fn default() -> Self {
        ConservativeConfig {
            n_alternatives: 10,
            eps_num: 1e-8,
        }
    }
}

/// Reusable buffers for the critic losses (one per trained agent).
///
/// The losses run in batched phases — stage all network inputs, run one
/// batched forward per role, do the per-sample scalar math, then one batched
/// backward per role — so each holds a [`BatchWorkspace`] per network role
/// plus flat staging buffers for inputs and cotangents.
#[derive(Debug)]
pub struct CriticScratch {
    anchor_bws: BatchWorkspace,
    alt_bws: BatchWorkspace,
    boot_bws: BatchWorkspace,
    actor_bws: BatchWorkspace,
    in_anchor: Vec<f64>,
    in_next: Vec<f64>,
    in_boot: Vec<f64>,
    in_alts: Vec<f64>,
    cot_alts: Vec<f64>,
    cot_anchor: Vec<f64>,
    anchors: Vec<f64>,
    residuals: Vec<f64>,
    weights_buf: Vec<f64>,
    zs: Vec<f64>,
}

impl CriticScratch {
    pub fn new(critic_spec: &NetworkSpec, actor_spec: &NetworkSpec) -> Self {
        CriticScratch {
            anchor_bws: BatchWorkspace::for_spec(critic_spec),
            alt_bws: BatchWorkspace::for_spec(critic_spec),
            boot_bws: BatchWorkspace::for_spec(critic_spec),
            actor_bws: BatchWorkspace::for_spec(actor_spec),
            in_anchor: Vec::new(),
            in_next: Vec::new(),
            in_boot: Vec::new(),
            in_alts: Vec::new(),
            cot_alts: Vec::new(),
            cot_anchor: Vec::new(),
            anchors: Vec::new(),
            residuals: Vec::new(),
            weights_buf: Vec::new(),
            zs: Vec::new(),
        }
    }
}

/// Value and gradient output of [`safety_loss`].
#[derive(Debug, Clone)]
pub struct SafetyLossOutput {
    pub loss: f64,
    /// Mean of the ½·residual² terms.
    pub bellman_term: f64,
    /// Mean of the ½·w·lse terms (0 for the plain Bellman critic).
    pub conservative_term: f64,
    /// Flat gradient with respect to the online safety-critic parameters.
    pub grad: Vec<f64>,
    /// Anchor values Q(s_i, a_i) under the online parameters.
    pub anchor_values: Vec<f64>,
}

/// Weighted conservative safety-critic loss and its parameter gradient.
///
/// `weights` supplies the per-sample conservatism weights for `Usc`/`UscNr`;
/// it is ignored for `Sc` (term dropped) and for `Csc` (weight forced to 1).
/// Alternatives are drawn fresh from `alt_rng` on every call — one uniform
/// action cube draw per alternative per sample, in batch order — for every
/// kind that uses the conservative term, so kinds consume the stream
/// identically. Gradients flow through the anchor and alternative critic
/// evaluations only; bootstrap targets and normalization constants are held
/// fixed.
#[allow(clippy::too_many_arguments)]
pub fn safety_loss(
    kind: CriticKind,
    batch: &Minibatch,
    buffer: &ReplayBuffer,
    weights: &[f64],
    safety: &Network,
    safety_target: &Network,
    actor_target: &Network,
    gamma: f64,
    cfg: &ConservativeConfig,
    alt_rng: &mut ChaCha8Rng,
    scratch: &mut CriticScratch,
) -> Result<SafetyLossOutput> {
    safety_loss_pinned(
        kind,
        batch,
        buffer,
        weights,
        safety,
        safety_target,
        actor_target,
        gamma,
        cfg,
        alt_rng,
        scratch,
        None,
    )
}

/// [`safety_loss`] with an optional override for the normalization constants
/// (used by tests probing the loss with the constants pinned, exactly as the
/// gradient treats them).
#[allow(clippy::too_many_arguments)]
fn safety_loss_pinned(
    kind: CriticKind,
    batch: &Minibatch,
    buffer: &ReplayBuffer,
    weights: &[f64],
    safety: &Network,
    safety_target: &Network,
    actor_target: &Network,
    gamma: f64,
    cfg: &ConservativeConfig,
    alt_rng: &mut ChaCha8Rng,
    scratch: &mut CriticScratch,
    pinned_stats: Option<BatchStats>,
) -> Result<SafetyLossOutput> {
    let b = batch.indices.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty minibatch".into()));
    }
    if kind.uses_influence() && weights.len() != b {
        return Err(Error::InvalidInput(format!(
            "got {} weights for a batch of {b}",
            weights.len()
        )));
    }
    if kind.uses_conservative_term() && cfg.n_alternatives == 0 {
        return Err(Error::InvalidInput(
            "conservative term needs at least one alternative action".into(),
        ));
    }
    let action_dim = buffer.action_dim();
    let state_dim = buffer.state_dim();
    let inv_b = 1.0 / b as f64;

    // Stage the anchor inputs (state ‖ action) and the next states.
    scratch.in_anchor.clear();
    scratch.in_next.clear();
    for &idx in &batch.indices {
        let t = buffer.get(idx);
        scratch.in_anchor.extend_from_slice(&t.state);
        scratch.in_anchor.extend_from_slice(&t.action);
        scratch.in_next.extend_from_slice(&t.next_state);
    }

    // Bootstrap values under the frozen networks: π'(s') then Q'(s', π'(s')).
    let next_actions = forward_batch(
        &actor_target.spec,
        &actor_target.params,
        &scratch.in_next,
        b,
        &mut scratch.actor_bws,
    )?;
    scratch.in_boot.clear();
    for i in 0..b {
        scratch
            .in_boot
            .extend_from_slice(&scratch.in_next[i * state_dim..(i + 1) * state_dim]);
        scratch
            .in_boot
            .extend_from_slice(&next_actions[i * action_dim..(i + 1) * action_dim]);
    }
    let q_next = forward_batch(
        &safety_target.spec,
        &safety_target.params,
        &scratch.in_boot,
        b,
        &mut scratch.boot_bws,
    )?;

    // Anchor values under the online parameters (activations retained for the
    // backward pass), then the per-sample Bellman residuals in batch order.
    let anchor_out = forward_batch(
        &safety.spec,
        &safety.params,
        &scratch.in_anchor,
        b,
        &mut scratch.anchor_bws,
    )?;
    scratch.anchors.clear();
    scratch.residuals.clear();
    let mut bellman_sum = 0.0;
    for (i, &idx) in batch.indices.iter().enumerate() {
        let t = buffer.get(idx);
        let q = anchor_out[i];
        let y = bellman_cost_target(t.cost, gamma, q_next[i], t.terminal);
        let res = q - y;
        scratch.anchors.push(q);
        scratch.residuals.push(res);
        bellman_sum += 0.5 * res * res;
    }

    let stats = match pinned_stats {
        Some(s) => s,
        None => batch_stats(&scratch.anchors, cfg.eps_num)?,
    };
    let inv_denom = 1.0 / stats.denom();

    // Resolve the per-sample weights once.
    scratch.weights_buf.clear();
    match kind {
        CriticKind::Sc => scratch.weights_buf.resize(b, 0.0),
        CriticKind::Csc => scratch.weights_buf.resize(b, 1.0),
        CriticKind::Usc | CriticKind::UscNr => scratch.weights_buf.extend_from_slice(weights),
    }

    let mut grad = vec![0.0; safety.spec.param_count()];
    let mut conservative_sum = 0.0;
    if kind.uses_conservative_term() {
        let m = cfg.n_alternatives;

        // Draw every alternative action up front — per sample, per
        // alternative, per dimension, in batch order — so all kinds with a
        // conservative term consume the stream identically, then evaluate
        // every (state, alternative) row in one batched forward.
        scratch.in_alts.clear();
        for &idx in &batch.indices {
            let t = buffer.get(idx);
            for _ in 0..m {
                scratch.in_alts.extend_from_slice(&t.state);
                for _ in 0..action_dim {
                    scratch.in_alts.push(rng::uniform_range(alt_rng, -1.0, 1.0));
                }
            }
        }
        let alt_out = forward_batch(
            &safety.spec,
            &safety.params,
            &scratch.in_alts,
            b * m,
            &mut scratch.alt_bws,
        )?;
        scratch.zs.clear();
        scratch.zs.extend_from_slice(alt_out);

        // Per-sample penalty values and softmax cotangents for the
        // alternatives; the ½·w·softmax·1/denom factor (and the 1/b of the
        // batch mean) is baked into each cotangent.
        scratch.cot_alts.clear();
        scratch.cot_alts.resize(b * m, 0.0);
        for i in 0..b {
            let w = scratch.weights_buf[i];
            let zs = &scratch.zs[i * m..(i + 1) * m];
            let pen = lse_penalty(zs, scratch.anchors[i], &stats)?;
            conservative_sum += 0.5 * w * pen;

            let z_max = zs
                .iter()
                .map(|q| (q - stats.mean) * inv_denom)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut exp_sum = 0.0;
            for &q in zs {
                exp_sum += ((q - stats.mean) * inv_denom - z_max).exp();
            }
            for (j, &q) in zs.iter().enumerate() {
                let soft = ((q - stats.mean) * inv_denom - z_max).exp() / exp_sum;
                scratch.cot_alts[i * m + j] = 0.5 * w * soft * inv_denom * inv_b;
            }
        }
        backward_batch(
            &safety.spec,
            &safety.params,
            &mut scratch.alt_bws,
            &scratch.cot_alts,
            Some(&mut grad),
            None,
        )?;
    }

    // Anchor backward: Bellman residual plus (for conservative kinds) the
    // −1/denom pull from the penalty's anchor term.
    scratch.cot_anchor.clear();
    for i in 0..b {
        let mut cot = scratch.residuals[i];
        if kind.uses_conservative_term() {
            cot += 0.5 * scratch.weights_buf[i] * (-inv_denom);
        }
        scratch.cot_anchor.push(cot * inv_b);
    }
    backward_batch(
        &safety.spec,
        &safety.params,
        &mut scratch.anchor_bws,
        &scratch.cot_anchor,
        Some(&mut grad),
        None,
    )?;

    let bellman_term = bellman_sum * inv_b;
    let conservative_term = conservative_sum * inv_b;
    Ok(SafetyLossOutput {
        loss: bellman_term + conservative_term,
        bellman_term,
        conservative_term,
        grad,
        anchor_values: scratch.anchors.clone(),
    })
}

/// Value and gradient output of [`reward_loss`].
#[derive(Debug, Clone)]
pub struct RewardLossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Plain one-step TD loss for the reward critic,
/// `mean_i ½·(Q_R(s_i,a_i) − (r_i + γ·Q_R'(s'_i, π'(s'_i))))²`,
/// with both bootstrap networks frozen.
pub fn reward_loss(
    batch: &Minibatch,
    buffer: &ReplayBuffer,
    reward: &Network,
    reward_target: &Network,
    actor_target: &Network,
    gamma: f64,
    scratch: &mut CriticScratch,
) -> Result<RewardLossOutput> {
    let b = batch.indices.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty minibatch".into()));
    }
    let action_dim = buffer.action_dim();
    let state_dim = buffer.state_dim();
    let inv_b = 1.0 / b as f64;

    scratch.in_anchor.clear();
    scratch.in_next.clear();
    for &idx in &batch.indices {
        let t = buffer.get(idx);
        scratch.in_anchor.extend_from_slice(&t.state);
        scratch.in_anchor.extend_from_slice(&t.action);
        scratch.in_next.extend_from_slice(&t.next_state);
    }

    let next_actions = forward_batch(
        &actor_target.spec,
        &actor_target.params,
        &scratch.in_next,
        b,
        &mut scratch.actor_bws,
    )?;
    scratch.in_boot.clear();
    for i in 0..b {
        scratch
            .in_boot
            .extend_from_slice(&scratch.in_next[i * state_dim..(i + 1) * state_dim]);
        scratch
            .in_boot
            .extend_from_slice(&next_actions[i * action_dim..(i + 1) * action_dim]);
    }
    let q_next = forward_batch(
        &reward_target.spec,
        &reward_target.params,
        &scratch.in_boot,
        b,
        &mut scratch.boot_bws,
    )?;
    let anchor_out = forward_batch(
        &reward.spec,
        &reward.params,
        &scratch.in_anchor,
        b,
        &mut scratch.anchor_bws,
    )?;

    let mut loss_sum = 0.0;
    scratch.cot_anchor.clear();
    for (i, &idx) in batch.indices.iter().enumerate() {
        let t = buffer.get(idx);
        let y = if t.terminal { t.reward } else { t.reward + gamma * q_next[i] };
        let res = anchor_out[i] - y;
        loss_sum += 0.5 * res * res;
        scratch.cot_anchor.push(res * inv_b);
    }
    let mut grad = vec![0.0; reward.spec.param_count()];
    backward_batch(
        &reward.spec,
        &reward.params,
        &mut scratch.anchor_bws,
        &scratch.cot_anchor,
        Some(&mut grad),
        None,
    )?;
    Ok(RewardLossOutput {
        loss: loss_sum * inv_b,
        grad,
    })
}
