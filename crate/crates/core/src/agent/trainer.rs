//! The per-run training loop, tying the environment, replay buffer,
//! critics, actor, and refinement stage together.
//!
//! Every step: act (exploration noise, then safety screening), store the
//! transition, and — once the buffer has warmed up — update the safety
//! critic, the reward critic, and the actor in that order, run refinement
//! on the most uncertain samples (the refining kind only), and soft-update
//! all target networks. The dual variable updates once per episode.
//!
//! All randomness fans out of one master seed into named substreams
//! (`env`, `exploration`, `sampling`, `alternatives`, `screening`,
//! `init-*`), so a change in one consumer never perturbs the others.

use crate::agent::{actor_loss, screen_action, ActorScratch, DualState, OUProcess, ScreenConfig};
use crate::config::{AgentKind, RunConfig};
use crate::critics::{reward_loss, safety_loss, ConservativeConfig, CriticKind, CriticScratch};
use crate::diffnet::{
    adam_step, backward_into, forward_into, soft_update, AdamState, Activation, Network,
    NetworkDocument, NetworkParameters, NetworkSpec, Workspace,
};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, Transition};
use crate::rng::substream;
use crate::uncertainty::{
    adjust_weight, interpolate_cost, refine_loss, scope_range, select_top_uncertain,
    InfluenceEstimator, InfluenceScope,
};
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

// TEMPORARY probe (remove before shipping).
static PROBE_NS: [std::sync::atomic::AtomicU64; 10] = [
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
];
static PROBE_LABELS: [&str; 10] = [
    "sample", "influence", "safety", "reward", "actor", "scan+interp", "refine", "soft+adam",
    "act", "env+push",
];
#[inline]
fn probe_add(i: usize, start: std::time::Instant) {
    PROBE_NS[i].fetch_add(
        start.elapsed().as_nanos() as u64,
        std::sync::atomic::Ordering::Relaxed,
    );
}
pub fn probe_dump() {
    if std::env::var("USC_PROBE").is_err() {
        return;
    }
    for (i, l) in PROBE_LABELS.iter().enumerate() {
        eprintln!(
            "probe {l}: {:.1} ms total",
            PROBE_NS[i].load(std::sync::atomic::Ordering::Relaxed) as f64 / 1e6
        );
    }
}

/// Which update ran, for order-of-operations instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePhase {
    SafetyCritic,
    RewardCritic,
    Actor,
    Refine,
    SoftUpdate,
    Dual,
}

/// One instrumented event: the global step (or episode-final step for the
/// dual update) at which a phase ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub episode: usize,
    pub phase: UpdatePhase,
}

/// Test and instrumentation switches that are not part of the persisted
/// configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOverrides {
    /// Forces every conservatism weight to zero (the uncertainty machinery
    /// is bypassed entirely).
    pub force_zero_weights: bool,
    /// Skips the refinement stage regardless of kind.
    pub disable_refinement: bool,
    /// Records an update-order trace.
    pub record_trace: bool,
}

/// Per-episode training summary (one CSV row).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub layout_seed: u64,
    pub reward: f64,
    pub cost: f64,
    pub success: bool,
    /// Multiplier value after this episode's dual update.
    pub lambda: f64,
    pub mean_u: f64,
    pub mean_u_tilde: f64,
    pub safety_loss: f64,
    pub bellman_term: f64,
    pub conservative_term: f64,
    pub reward_loss: f64,
    pub actor_loss: f64,
    pub refine_loss: f64,
    pub steps: usize,
}

/// Optional per-step diagnostics row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub episode: usize,
    pub t: usize,
    pub reward: f64,
    pub cost: f64,
    pub mean_u: f64,
    pub mean_u_tilde: f64,
    pub safety_loss: f64,
    pub reward_loss: f64,
    pub actor_loss: f64,
    pub refine_loss: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct UpdateStats {
    mean_u: f64,
    mean_u_tilde: f64,
    safety_loss: f64,
    bellman_term: f64,
    conservative_term: f64,
    reward_loss: f64,
    actor_loss: f64,
    refine_loss: f64,
}

/// A self-contained run snapshot: every network (with target and optimizer
/// state), the dual variable, progress counters, and the full resolved
/// configuration, so deployment and map evaluation can rebuild the exact
/// setup from the file alone.
pub const RUN_CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub format_version: u32,
    pub kind: AgentKind,
    pub seed: u64,
    pub episode: usize,
    pub total_steps: u64,
    pub lambda: f64,
    pub config: RunConfig,
    pub actor: NetworkDocument,
    pub reward: NetworkDocument,
    pub safety: Option<NetworkDocument>,
}

impl RunCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Parse(format!("serialize checkpoint: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: RunCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ck.format_version != RUN_CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {} (expected {RUN_CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.config.validate()?;
        for (name, doc) in [("actor", Some(&ck.actor)), ("reward", Some(&ck.reward)), ("safety", ck.safety.as_ref())] {
            let Some(doc) = doc else { continue };
            doc.spec.validate()?;
            if doc.params.len() != doc.spec.param_count() {
                return Err(Error::Parse(format!("{name} network parameter length mismatch")));
            }
            if let Some(t) = &doc.target_params {
                if t.len() != doc.params.len() {
                    return Err(Error::Parse(format!("{name} target parameter length mismatch")));
                }
            }
            if let Some(a) = &doc.adam {
                if a.m.len() != doc.params.len() || a.v.len() != doc.params.len() {
                    return Err(Error::Parse(format!("{name} optimizer state length mismatch")));
                }
            }
        }
        if ck.kind.uses_safety_stack() != ck.safety.is_some() {
            return Err(Error::Parse(
                "checkpoint kind and safety-network presence disagree".into(),
            ));
        }
        Ok(ck)
    }

    /// Rebuilds a live network (online parameters) from a stored document.
    pub fn network_from(doc: &NetworkDocument) -> Result<Network> {
        Network::new(doc.spec.clone(), NetworkParameters { flat: doc.params.clone() })
    }
}

/// Everything one training run owns.
#[derive(Debug)]
pub struct Trainer {
    cfg: RunConfig,
    kind: AgentKind,
    critic_kind: Option<CriticKind>,
    seed: u64,
    env: Env,
    buffer: ReplayBuffer,

    actor: Network,
    actor_target: Network,
    actor_adam: AdamState,
    reward: Network,
    reward_target: Network,
    reward_adam: AdamState,
    safety: Option<Network>,
    safety_target: Option<Network>,
    safety_adam: Option<AdamState>,

    dual: DualState,
    ou: OUProcess,
    influence_scope: InfluenceScope,
    cons_cfg: ConservativeConfig,
    screen_cfg: ScreenConfig,

    env_rng: ChaCha8Rng,
    exploration_rng: ChaCha8Rng,
    sampling_rng: ChaCha8Rng,
    alternatives_rng: ChaCha8Rng,
    screening_rng: ChaCha8Rng,

    episode: usize,
    global_step: u64,

    critic_scratch: CriticScratch,
    actor_scratch: ActorScratch,
    act_ws: Workspace,
    screen_ws: Workspace,
    refine_ws: Workspace,
    screen_input: Vec<f64>,
    infl_ws: Workspace,
    infl_grad_buf: Vec<f64>,
    infl_input: Vec<f64>,
    row_buf: Vec<f64>,
    weights: Vec<f64>,
    u_scores: Vec<f64>,
    anchor_q: Vec<f64>,

    overrides: TrainOverrides,
    trace: Vec<TraceEvent>,
    step_records: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, seed: u64, overrides: TrainOverrides) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.environment.build()?;
        let obs_dim = env.spec().obs_dim;
        let action_dim = env.spec().action_dim;
        let agent = &cfg.agent;

        let actor_spec = NetworkSpec::mlp(
            obs_dim,
            &agent.hidden_sizes,
            action_dim,
            Activation::Relu,
            Activation::Tanh,
        )?;
        let critic_spec = NetworkSpec::mlp(
            obs_dim + action_dim,
            &agent.hidden_sizes,
            1,
            Activation::Relu,
            Activation::Identity,
        )?;

        let actor = Network::init_uniform(actor_spec.clone(), &mut substream(seed, "init-actor"))?;
        let actor_target = actor.clone();
        let actor_adam = AdamState::new(actor_spec.param_count());
        let reward =
            Network::init_uniform(critic_spec.clone(), &mut substream(seed, "init-reward-critic"))?;
        let reward_target = reward.clone();
        let reward_adam = AdamState::new(critic_spec.param_count());

        let kind = agent.kind;
        let (safety, safety_target, safety_adam) = if kind.uses_safety_stack() {
            let net = Network::init_uniform(
                critic_spec.clone(),
                &mut substream(seed, "init-safety-critic"),
            )?;
            let target = net.clone();
            let adam = AdamState::new(critic_spec.param_count());
            (Some(net), Some(target), Some(adam))
        } else {
            (None, None, None)
        };

        let influence_scope = agent.influence_scope.resolve(critic_spec.param_count());
        let (_, scope_len) = scope_range(&critic_spec, influence_scope);

        Ok(Trainer {
            kind,
            critic_kind: kind.critic_kind(),
            seed,
            buffer: ReplayBuffer::new(agent.buffer_capacity, obs_dim, action_dim)?,
            dual: DualState::new(agent.lambda_init, agent.dual_lr, cfg.environment.cost_budget)?,
            ou: OUProcess::new(action_dim, agent.ou_theta, agent.ou_sigma)?,
            influence_scope,
            cons_cfg: ConservativeConfig {
                n_alternatives: agent.n_alternatives,
                eps_num: agent.eps_num,
            },
            screen_cfg: ScreenConfig {
                eps_safe: agent.eps_safe,
                samples: agent.screen_samples,
                sigma: agent.ou_sigma,
            },
            env_rng: substream(seed, "env"),
            exploration_rng: substream(seed, "exploration"),
            sampling_rng: substream(seed, "sampling"),
            alternatives_rng: substream(seed, "alternatives"),
            screening_rng: substream(seed, "screening"),
            episode: 0,
            global_step: 0,
            critic_scratch: CriticScratch::new(&critic_spec, &actor_spec),
            actor_scratch: ActorScratch::new(&actor_spec, &critic_spec),
            act_ws: Workspace::for_spec(&actor_spec),
            screen_ws: Workspace::for_spec(&critic_spec),
            refine_ws: Workspace::for_spec(&critic_spec),
            screen_input: vec![0.0; obs_dim + action_dim],
            infl_ws: Workspace::for_spec(&critic_spec),
            infl_grad_buf: vec![0.0; critic_spec.param_count()],
            infl_input: vec![0.0; obs_dim + action_dim],
            row_buf: Vec::with_capacity(agent.batch_size * scope_len),
            weights: Vec::with_capacity(agent.batch_size),
            u_scores: Vec::new(),
            anchor_q: Vec::with_capacity(agent.batch_size),
            overrides,
            trace: Vec::new(),
            step_records: Vec::new(),
            actor,
            actor_target,
            actor_adam,
            reward,
            reward_target,
            reward_adam,
            safety,
            safety_target,
            safety_adam,
            env,
            cfg: cfg.clone(),
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn lambda(&self) -> f64 {
        self.dual.lambda()
    }

    pub fn actor(&self) -> &Network {
        &self.actor
    }

    pub fn safety(&self) -> Option<&Network> {
        self.safety.as_ref()
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn step_records(&self) -> &[StepRecord] {
        &self.step_records
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn record(&mut self, phase: UpdatePhase) {
        if self.overrides.record_trace {
            self.trace.push(TraceEvent {
                step: self.global_step,
                episode: self.episode,
                phase,
            });
        }
    }

    /// Runs every remaining configured episode.
    pub fn train(&mut self) -> Result<Vec<EpisodeRecord>> {
        let mut records = Vec::new();
        while self.episode < self.cfg.agent.episodes {
            records.push(self.run_episode()?);
        }
        probe_dump();
        Ok(records)
    }

    /// Runs one episode end to end (including the dual update) and returns
    /// its summary row.
    pub fn run_episode(&mut self) -> Result<EpisodeRecord> {
        let layout_seed = self.env_rng.next_u64();
        let mut obs = self.env.reset(layout_seed)?;
        self.ou.reset();

        let warmup = self.cfg.agent.warmup_size();
        let collect_steps = self.cfg.agent.step_csv;
        let uses_safety = self.kind.uses_safety_stack();

        let (mut ep_reward, mut ep_cost) = (0.0, 0.0);
        let mut success = false;
        let mut t = 0usize;
        let mut updates = 0usize;
        let mut sums = UpdateStats::default();

        loop {
            let __t = std::time::Instant::now();
            let action = self.act_train(&obs)?;
            probe_add(8, __t);
            let __t = std::time::Instant::now();
            let outcome = self.env.step(&action)?;
            self.buffer.push(Transition {
                state: obs,
                action,
                reward: outcome.reward,
                cost: outcome.cost,
                next_state: outcome.obs.clone(),
                terminal: outcome.terminal,
            })?;
            probe_add(9, __t);
            if uses_safety {
                self.dual.accumulate(outcome.cost);
            }
            ep_reward += outcome.reward;
            ep_cost += outcome.cost;
            success |= outcome.success;
            t += 1;
            self.global_step += 1;

            let stats = if self.buffer.len() >= warmup {
                let s = self.update_networks()?;
                updates += 1;
                sums.mean_u += s.mean_u;
                sums.mean_u_tilde += s.mean_u_tilde;
                sums.safety_loss += s.safety_loss;
                sums.bellman_term += s.bellman_term;
                sums.conservative_term += s.conservative_term;
                sums.reward_loss += s.reward_loss;
                sums.actor_loss += s.actor_loss;
                sums.refine_loss += s.refine_loss;
                Some(s)
            } else {
                None
            };
            if collect_steps {
                let s = stats.unwrap_or_default();
                self.step_records.push(StepRecord {
                    step: self.global_step,
                    episode: self.episode,
                    t,
                    reward: outcome.reward,
                    cost: outcome.cost,
                    mean_u: s.mean_u,
                    mean_u_tilde: s.mean_u_tilde,
                    safety_loss: s.safety_loss,
                    reward_loss: s.reward_loss,
                    actor_loss: s.actor_loss,
                    refine_loss: s.refine_loss,
                });
            }

            obs = outcome.obs;
            if outcome.terminal {
                break;
            }
        }

        let lambda = if uses_safety {
            self.record(UpdatePhase::Dual);
            self.dual.end_episode()
        } else {
            0.0
        };
        let inv = if updates > 0 { 1.0 / updates as f64 } else { 0.0 };
        let record = EpisodeRecord {
            episode: self.episode,
            layout_seed,
            reward: ep_reward,
            cost: ep_cost,
            success,
            lambda,
            mean_u: sums.mean_u * inv,
            mean_u_tilde: sums.mean_u_tilde * inv,
            safety_loss: sums.safety_loss * inv,
            bellman_term: sums.bellman_term * inv,
            conservative_term: sums.conservative_term * inv,
            reward_loss: sums.reward_loss * inv,
            actor_loss: sums.actor_loss * inv,
            refine_loss: sums.refine_loss * inv,
            steps: t,
        };
        self.episode += 1;
        Ok(record)
    }

    /// Training-time action selection: policy output plus exploration
    /// noise, clipped, then safety-screened when a safety critic exists.
    fn act_train(&mut self, obs: &[f64]) -> Result<Vec<f64>> {
        forward_into(&self.actor.spec, &self.actor.params, obs, &mut self.act_ws)?;
        let mut action = self.act_ws.output().to_vec();
        let noise = self.ou.step(&mut self.exploration_rng);
        for (a, &n) in action.iter_mut().zip(noise.iter()) {
            *a = (*a + n).clamp(-1.0, 1.0);
        }
        if let Some(safety) = &self.safety {
            action = screen_action(
                obs,
                &action,
                safety,
                &self.screen_cfg,
                &mut self.screening_rng,
                &mut self.screen_ws,
                &mut self.screen_input,
            )?;
        }
        Ok(action)
    }

    fn abort_if_not_finite(&self, which: &str, loss: f64) -> Result<()> {
        if loss.is_finite() {
            return Ok(());
        }
        Err(Error::Numeric(format!(
            "non-finite {which} loss ({loss}) at episode {}, step {}; multiplier {}, buffer fill {}",
            self.episode,
            self.global_step,
            self.dual.lambda(),
            self.buffer.len()
        )))
    }

    fn update_networks(&mut self) -> Result<UpdateStats> {
        let batch_size = self.cfg.agent.batch_size;
        let gamma = self.cfg.environment.discount;
        let lr_actor = self.cfg.agent.actor_lr;
        let lr_reward = self.cfg.agent.reward_critic_lr;
        let lr_safety = self.cfg.agent.safety_critic_lr;
        let tau = self.cfg.agent.tau;
        let damping = self.cfg.agent.gn_damping;
        let top_n = self.cfg.agent.refine_top_n;
        let neighbours = self.cfg.agent.refine_neighbours;
        let beta = self.cfg.agent.trust_coef;
        let eps_trust = self.cfg.agent.trust_epsilon;
        let (kl_coef, kl_sigma) = match self.kind {
            AgentKind::Ddpg => (0.0, self.cfg.agent.kl_sigma),
            _ => (self.cfg.agent.kl_coef, self.cfg.agent.kl_sigma),
        };

        let mut stats = UpdateStats::default();
        let __t = std::time::Instant::now();
        let batch = self.buffer.sample_uniform(batch_size, &mut self.sampling_rng)?;
        let b = batch.indices.len();

        // Policy snapshot at update start, for the actor's proximity term.
        let pi_old = self.actor.params.clone();
        probe_add(0, __t);

        let frozen_safety = if let Some(critic_kind) = self.critic_kind {
            // Parameter snapshot at update start: the influence gradients
            // and the refinement divergence both anchor to it.
            let frozen = self.safety.as_ref().expect("safety kind has a critic").params.clone();

            self.weights.clear();
            let __t = std::time::Instant::now();
            if critic_kind.uses_influence() {
                if self.overrides.force_zero_weights {
                    self.weights.resize(b, 0.0);
                    self.u_scores.clear();
                    self.u_scores.resize(b, 0.0);
                } else {
                    let safety_spec = &self.safety.as_ref().expect("checked").spec;
                    let (off, len) = scope_range(safety_spec, self.influence_scope);
                    self.row_buf.clear();
                    self.row_buf.resize(b * len, 0.0);
                    self.anchor_q.clear();
                    for (i, &idx) in batch.indices.iter().enumerate() {
                        let tr = self.buffer.get(idx);
                        let sl = tr.state.len();
                        self.infl_input[..sl].copy_from_slice(&tr.state);
                        self.infl_input[sl..].copy_from_slice(&tr.action);
                        forward_into(safety_spec, &frozen, &self.infl_input, &mut self.infl_ws)?;
                        self.anchor_q.push(self.infl_ws.output()[0]);
                        self.infl_grad_buf.iter_mut().for_each(|g| *g = 0.0);
                        backward_into(
                            safety_spec,
                            &frozen,
                            &mut self.infl_ws,
                            &[1.0],
                            1.0,
                            &mut self.infl_grad_buf,
                            None,
                        )?;
                        self.row_buf[i * len..(i + 1) * len]
                            .copy_from_slice(&self.infl_grad_buf[off..off + len]);
                    }
                    let est = InfluenceEstimator::from_rows(
                        std::mem::take(&mut self.row_buf),
                        b,
                        len,
                        damping,
                    )?;
                    self.u_scores = est.batch_influences();
                    self.row_buf = est.into_rows();

                    let mean_q = self.anchor_q.iter().sum::<f64>() / b as f64;
                    let mut u_sum = 0.0;
                    let mut w_sum = 0.0;
                    for i in 0..b {
                        let score = adjust_weight(self.u_scores[i], self.anchor_q[i], mean_q)?;
                        self.weights.push(score.u_tilde);
                        u_sum += score.u;
                        w_sum += score.u_tilde;
                    }
                    stats.mean_u = u_sum / b as f64;
                    stats.mean_u_tilde = w_sum / b as f64;
                }
            }
            probe_add(1, __t);

            let __t = std::time::Instant::now();
            let out = safety_loss(
                critic_kind,
                &batch,
                &self.buffer,
                &self.weights,
                self.safety.as_ref().expect("checked"),
                self.safety_target.as_ref().expect("checked"),
                &self.actor_target,
                gamma,
                &self.cons_cfg,
                &mut self.alternatives_rng,
                &mut self.critic_scratch,
            )?;
            self.abort_if_not_finite("safety-critic", out.loss)?;
            adam_step(
                &mut self.safety.as_mut().expect("checked").params,
                &out.grad,
                self.safety_adam.as_mut().expect("checked"),
                lr_safety,
            )?;
            self.record(UpdatePhase::SafetyCritic);
            stats.safety_loss = out.loss;
            stats.bellman_term = out.bellman_term;
            stats.conservative_term = out.conservative_term;
            probe_add(2, __t);
            Some(frozen)
        } else {
            None
        };

        let __t = std::time::Instant::now();
        let rout = reward_loss(
            &batch,
            &self.buffer,
            &self.reward,
            &self.reward_target,
            &self.actor_target,
            gamma,
            &mut self.critic_scratch,
        )?;
        self.abort_if_not_finite("reward-critic", rout.loss)?;
        adam_step(&mut self.reward.params, &rout.grad, &mut self.reward_adam, lr_reward)?;
        self.record(UpdatePhase::RewardCritic);
        stats.reward_loss = rout.loss;
        probe_add(3, __t);

        let __t = std::time::Instant::now();
        let lambda = if self.kind.uses_safety_stack() { self.dual.lambda() } else { 0.0 };
        let aout = actor_loss(
            &batch,
            &self.buffer,
            &self.actor,
            &self.reward,
            self.safety.as_ref(),
            lambda,
            kl_coef,
            kl_sigma,
            &pi_old,
            &mut self.actor_scratch,
        )?;
        self.abort_if_not_finite("actor", aout.loss)?;
        adam_step(&mut self.actor.params, &aout.grad, &mut self.actor_adam, lr_actor)?;
        self.record(UpdatePhase::Actor);
        stats.actor_loss = aout.loss;
        probe_add(4, __t);

        if self.critic_kind == Some(CriticKind::Usc)
            && !self.overrides.disable_refinement
            && !self.overrides.force_zero_weights
        {
            let frozen = frozen_safety.as_ref().expect("refining kind has a snapshot");
            let __t = std::time::Instant::now();
            let n = top_n.min(b);
            let top = select_top_uncertain(&self.u_scores, n)?;
            // Neighbours come from the confident remainder of the buffer:
            // every uncertain anchor is excluded from every search, and all
            // n searches share one pass over the records.
            let anchors: Vec<usize> = top.iter().map(|&pos| batch.indices[pos]).collect();
            let queries: Vec<Vec<f64>> = anchors
                .iter()
                .map(|&idx| {
                    let tr = self.buffer.get(idx);
                    let mut query = Vec::with_capacity(tr.state.len() + tr.action.len());
                    query.extend_from_slice(&tr.state);
                    query.extend_from_slice(&tr.action);
                    query
                })
                .collect();
            let neigh_sets =
                self.buffer.knn_many(&queries, neighbours, self.buffer.scaler(), &anchors)?;
            let mut targets = Vec::with_capacity(n);
            for (query, neigh) in queries.into_iter().zip(neigh_sets.iter()) {
                let costs: Vec<f64> = neigh.iter().map(|&(i, _)| self.buffer.get(i).cost).collect();
                let dists: Vec<f64> = neigh.iter().map(|&(_, d)| d).collect();
                targets.push(interpolate_cost(query, &costs, &dists)?);
            }
            probe_add(5, __t);
            let __t = std::time::Instant::now();
            let rfout = refine_loss(
                &targets,
                self.safety.as_ref().expect("checked"),
                frozen,
                beta,
                eps_trust,
                &mut self.refine_ws,
            )?;
            self.abort_if_not_finite("refinement", rfout.loss)?;
            adam_step(
                &mut self.safety.as_mut().expect("checked").params,
                &rfout.grad,
                self.safety_adam.as_mut().expect("checked"),
                lr_safety,
            )?;
            self.record(UpdatePhase::Refine);
            stats.refine_loss = rfout.loss;
            probe_add(6, __t);
        }

        let __t = std::time::Instant::now();
        soft_update(&mut self.actor_target.params.flat, &self.actor.params.flat, tau)?;
        soft_update(&mut self.reward_target.params.flat, &self.reward.params.flat, tau)?;
        if let (Some(target), Some(online)) = (self.safety_target.as_mut(), self.safety.as_ref()) {
            soft_update(&mut target.params.flat, &online.params.flat, tau)?;
        }
        self.record(UpdatePhase::SoftUpdate);
        probe_add(7, __t);

        Ok(stats)
    }

    /// Serializable snapshot of the run.
    pub fn checkpoint(&self) -> RunCheckpoint {
        let doc = |net: &Network, target: &Network, adam: &AdamState| {
            NetworkDocument::new(
                net.spec.clone(),
                net.params.flat.clone(),
                Some(target.params.flat.clone()),
                Some(adam.clone()),
            )
        };
        RunCheckpoint {
            format_version: RUN_CHECKPOINT_VERSION,
            kind: self.kind,
            seed: self.seed,
            episode: self.episode,
            total_steps: self.global_step,
            lambda: self.dual.lambda(),
            config: self.cfg.clone(),
            actor: doc(&self.actor, &self.actor_target, &self.actor_adam),
            reward: doc(&self.reward, &self.reward_target, &self.reward_adam),
            safety: match (&self.safety, &self.safety_target, &self.safety_adam) {
                (Some(n), Some(t), Some(a)) => Some(doc(n, t, a)),
                _ => None,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    /// A configuration small enough for loop tests to run in milliseconds.
    fn tiny_config(kind: &str, episodes: usize) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{
                "environment": {{"horizon": 25, "point_goal": {{"hazard_count": 2}}}},
                "agent": {{
                    "kind": "{kind}",
                    "episodes": {episodes},
                    "batch_size": 8,
                    "warmup_multiplier": 2,
                    "buffer_capacity": 4000,
                    "hidden_sizes": [8, 8],
                    "n_alternatives": 3,
                    "screen_samples": 4,
                    "refine_top_n": 2,
                    "refine_neighbours": 3
                }}
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn zero_episodes_leave_networks_untouched() {
        let cfg = tiny_config("usc", 0);
        let mut trainer = Trainer::new(&cfg, 5, TrainOverrides::default()).unwrap();
        let before = trainer.actor.params.flat.clone();
        let safety_before = trainer.safety.as_ref().unwrap().params.flat.clone();
        let records = trainer.train().unwrap();
        assert!(records.is_empty());
        assert_eq!(trainer.actor.params.flat, before);
        assert_eq!(trainer.safety.as_ref().unwrap().params.flat, safety_before);
        assert_eq!(trainer.global_step(), 0);
    }

    #[test]
    fn identical_seeds_reproduce_identical_records() {
        let cfg = tiny_config("usc", 3);
        let run = |seed: u64| {
            let mut t = Trainer::new(&cfg, seed, TrainOverrides::default()).unwrap();
            let recs = t.train().unwrap();
            (recs, t.actor.params.flat.clone())
        };
        let (r1, p1) = run(9);
        let (r2, p2) = run(9);
        assert_eq!(r1, r2);
        assert_eq!(
            p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let (r3, _) = run(10);
        assert_ne!(r1, r3);
    }

    #[test]
    fn zero_weight_run_reduces_to_the_plain_bellman_kind() {
        // The refining kind with every weight forced to zero and refinement
        // off must follow the exact trajectory of the plain Bellman kind:
        // same episodes, same parameters, bit for bit.
        let mut sc_cfg = tiny_config("sc", 3);
        let mut usc_cfg = tiny_config("usc", 3);
        sc_cfg.agent.kind = crate::config::AgentKind::Sc;
        usc_cfg.agent.kind = crate::config::AgentKind::Usc;

        let mut sc = Trainer::new(&sc_cfg, 12, TrainOverrides::default()).unwrap();
        let sc_records = sc.train().unwrap();

        let mut usc = Trainer::new(
            &usc_cfg,
            12,
            TrainOverrides {
                force_zero_weights: true,
                disable_refinement: true,
                record_trace: false,
            },
        )
        .unwrap();
        let usc_records = usc.train().unwrap();

        for (a, b) in sc_records.iter().zip(usc_records.iter()) {
            assert_eq!(a.layout_seed, b.layout_seed);
            assert_eq!(a.reward.to_bits(), b.reward.to_bits(), "episode {}", a.episode);
            assert_eq!(a.cost.to_bits(), b.cost.to_bits());
            assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
            assert_eq!(a.steps, b.steps);
        }
        let pa = &sc.safety.as_ref().unwrap().params.flat;
        let pb = &usc.safety.as_ref().unwrap().params.flat;
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in sc.actor.params.flat.iter().zip(usc.actor.params.flat.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn update_trace_follows_the_prescribed_order() {
        let cfg = tiny_config("usc", 2);
        let mut trainer = Trainer::new(
            &cfg,
            3,
            TrainOverrides { record_trace: true, ..Default::default() },
        )
        .unwrap();
        trainer.train().unwrap();
        let trace = trainer.trace();
        assert!(!trace.is_empty());

        // Per step: safety critic, reward critic, actor, refinement, soft
        // update — in that order; the dual update closes each episode.
        let mut by_step: std::collections::BTreeMap<u64, Vec<UpdatePhase>> =
            std::collections::BTreeMap::new();
        let mut dual_episodes = Vec::new();
        for e in trace {
            if e.phase == UpdatePhase::Dual {
                dual_episodes.push(e.episode);
            } else {
                by_step.entry(e.step).or_default().push(e.phase);
            }
        }
        assert_eq!(dual_episodes, vec![0, 1]);
        let mut saw_update_step = false;
        for (step, phases) in &by_step {
            saw_update_step = true;
            assert_eq!(
                phases,
                &vec![
                    UpdatePhase::SafetyCritic,
                    UpdatePhase::RewardCritic,
                    UpdatePhase::Actor,
                    UpdatePhase::Refine,
                    UpdatePhase::SoftUpdate
                ],
                "step {step}"
            );
        }
        assert!(saw_update_step, "warmup never completed; enlarge the test budget");

        // The unconstrained baseline runs no safety phases at all.
        let mut ddpg = Trainer::new(
            &tiny_config("ddpg", 2),
            3,
            TrainOverrides { record_trace: true, ..Default::default() },
        )
        .unwrap();
        ddpg.train().unwrap();
        assert!(ddpg.trace().iter().all(|e| {
            e.phase != UpdatePhase::SafetyCritic
                && e.phase != UpdatePhase::Refine
                && e.phase != UpdatePhase::Dual
        }));
        assert!(ddpg.trace().iter().any(|e| e.phase == UpdatePhase::Actor));
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly() {
        let cfg = tiny_config("usc", 2);
        let mut trainer = Trainer::new(&cfg, 77, TrainOverrides::default()).unwrap();
        trainer.train().unwrap();
        let ck = trainer.checkpoint();
        let json = ck.to_json().unwrap();
        let back = RunCheckpoint::from_json(&json).unwrap();
        assert_eq!(back.episode, 2);
        assert_eq!(back.kind, crate::config::AgentKind::Usc);
        assert_eq!(back.lambda.to_bits(), trainer.lambda().to_bits());
        for (a, b) in ck.actor.params.iter().zip(back.actor.params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let sa = ck.safety.as_ref().unwrap();
        let sb = back.safety.as_ref().unwrap();
        for (a, b) in sa.params.iter().zip(sb.params.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(
            sa.target_params.as_ref().unwrap(),
            sb.target_params.as_ref().unwrap()
        );

        // A truncated or version-bumped document is rejected.
        assert!(RunCheckpoint::from_json("{}").is_err());
        let mut wrong = ck.clone();
        wrong.format_version = 99;
        assert!(RunCheckpoint::from_json(&wrong.to_json().unwrap()).is_err());
        let mut mismatched = ck;
        mismatched.safety = None;
        assert!(RunCheckpoint::from_json(&mismatched.to_json().unwrap()).is_err());
    }

    #[test]
    fn divergent_losses_abort_with_a_diagnostic() {
        let mut cfg = tiny_config("sc", 5);
        cfg.agent.reward_critic_lr = 1e300;
        let mut trainer = Trainer::new(&cfg, 1, TrainOverrides::default()).unwrap();
        let err = trainer.train().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
        assert!(msg.contains("episode"), "{msg}");
    }

    #[test]
    fn velocity_task_trains_end_to_end() {
        let cfg = RunConfig::from_json(
            r#"{
                "environment": {"family": "velocity_limit", "horizon": 20},
                "agent": {
                    "kind": "csc", "episodes": 3, "batch_size": 8,
                    "warmup_multiplier": 2, "buffer_capacity": 2000,
                    "hidden_sizes": [8], "n_alternatives": 3, "screen_samples": 4
                }
            }"#,
        )
        .unwrap();
        let mut trainer = Trainer::new(&cfg, 4, TrainOverrides::default()).unwrap();
        let records = trainer.train().unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert!(r.reward.is_finite() && r.cost.is_finite());
            assert_eq!(r.steps, 20);
            assert!(!r.success);
        }
    }

    #[test]
    fn step_rows_are_collected_when_enabled() {
        let mut cfg = tiny_config("csc", 2);
        cfg.agent.step_csv = true;
        let mut trainer = Trainer::new(&cfg, 2, TrainOverrides::default()).unwrap();
        let records = trainer.train().unwrap();
        let total: usize = records.iter().map(|r| r.steps).sum();
        assert_eq!(trainer.step_records().len(), total);
        assert!(trainer.step_records().iter().all(|s| s.reward.is_finite()));
    }
}
