//! Deployment rollouts: noise-free policy execution with the safety screen
//! still active, recorded step by step so calibration labels can later be
//! recomputed from the raw trajectories.

use crate::agent::{screen_action, RunCheckpoint, ScreenConfig};
use crate::diffnet::{forward_into, Network, Workspace};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::rng::substream;
use rand_core::RngCore;

/// Raw per-step record of one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutLog {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

/// One evaluation episode's summary row.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployEpisode {
    pub episode: usize,
    pub layout_seed: u64,
    pub reward: f64,
    pub cost: f64,
    pub success: bool,
    pub steps: usize,
}

/// Across-episode aggregate: mean ± population std and the success rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeployAggregate {
    pub episodes: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployOutput {
    pub episodes: Vec<DeployEpisode>,
    pub logs: Vec<RolloutLog>,
    pub aggregate: DeployAggregate,
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rolls the checkpointed policy out on `env` for `n_episodes` without
/// exploration noise; the safety screen stays active whenever the
/// checkpoint carries a safety critic. Layout seeds come from the `env`
/// substream of `seed`, screening noise from the `screening` substream, so
/// identical inputs reproduce identical outputs.
pub fn deploy_policy(
    checkpoint: &RunCheckpoint,
    env: &mut Env,
    n_episodes: usize,
    seed: u64,
) -> Result<DeployOutput> {
    let actor = RunCheckpoint::network_from(&checkpoint.actor)?;
    let safety: Option<Network> = match &checkpoint.safety {
        Some(doc) => Some(RunCheckpoint::network_from(doc)?),
        None => None,
    };

    let obs_dim = env.spec().obs_dim;
    let action_dim = env.spec().action_dim;
    if actor.spec.input_dim() != obs_dim || actor.spec.output_dim() != action_dim {
        return Err(Error::InvalidInput(format!(
            "checkpointed actor is {}→{} but the task needs {obs_dim}→{action_dim}",
            actor.spec.input_dim(),
            actor.spec.output_dim()
        )));
    }
    if let Some(s) = &safety {
        if s.spec.input_dim() != obs_dim + action_dim || s.spec.output_dim() != 1 {
            return Err(Error::InvalidInput(format!(
                "checkpointed safety critic is {}→{} but the task needs {}→1",
                s.spec.input_dim(),
                s.spec.output_dim(),
                obs_dim + action_dim
            )));
        }
    }

    let agent = &checkpoint.config.agent;
    let screen_cfg = ScreenConfig {
        eps_safe: agent.eps_safe,
        samples: agent.screen_samples,
        sigma: agent.ou_sigma,
    };
    let mut env_rng = substream(seed, "env");
    let mut screening_rng = substream(seed, "screening");
    let mut actor_ws = Workspace::for_spec(&actor.spec);
    let mut screen_ws = safety.as_ref().map(|s| Workspace::for_spec(&s.spec));
    let mut screen_input = vec![0.0; obs_dim + action_dim];

    let mut episodes = Vec::with_capacity(n_episodes);
    let mut logs = Vec::with_capacity(n_episodes);
    let mut rewards = Vec::with_capacity(n_episodes);
    let mut costs = Vec::with_capacity(n_episodes);
    let mut successes = 0usize;

    for e in 0..n_episodes {
        let layout_seed = env_rng.next_u64();
        let mut obs = env.reset(layout_seed)?;
        let mut log = RolloutLog {
            observations: Vec::new(),
            actions: Vec::new(),
            costs: Vec::new(),
        };
        let (mut ep_reward, mut ep_cost) = (0.0, 0.0);
        let mut success = false;
        let mut steps = 0usize;
        loop {
            forward_into(&actor.spec, &actor.params, &obs, &mut actor_ws)?;
            let mut action = actor_ws.output().to_vec();
            if let (Some(s), Some(ws)) = (&safety, screen_ws.as_mut()) {
                action = screen_action(
                    &obs,
                    &action,
                    s,
                    &screen_cfg,
                    &mut screening_rng,
                    ws,
                    &mut screen_input,
                )?;
            }
            let outcome = env.step(&action)?;
            log.observations.push(obs);
            log.actions.push(action);
            log.costs.push(outcome.cost);
            ep_reward += outcome.reward;
            ep_cost += outcome.cost;
            success |= outcome.success;
            steps += 1;
            obs = outcome.obs;
            if outcome.terminal {
                break;
            }
        }
        if success {
            successes += 1;
        }
        rewards.push(ep_reward);
        costs.push(ep_cost);
        episodes.push(DeployEpisode {
            episode: e,
            layout_seed,
            reward: ep_reward,
            cost: ep_cost,
            success,
            steps,
        });
        logs.push(log);
    }

    let (mean_reward, std_reward) = mean_and_population_std(&rewards);
    let (mean_cost, std_cost) = mean_and_population_std(&costs);
    let success_rate = if n_episodes > 0 { successes as f64 / n_episodes as f64 } else { 0.0 };
    Ok(DeployOutput {
        episodes,
        logs,
        aggregate: DeployAggregate {
            episodes: n_episodes,
            mean_reward,
            std_reward,
            mean_cost,
            std_cost,
            success_rate,
        },
    })
}
