//! Run orchestration: deterministic run directories, the immutable run
//! manifest, CSV artifact writers, and the subcommand entry points shared
//! by the command-line binary and the test suites.
//!
//! Every artifact except the manifest is reproducible byte for byte from
//! the same inputs: numbers are written through `Display` (shortest
//! round-trip form), rows come from deterministic computations, and wall
//! time lives only in the manifest, which is written once before work
//! starts and never touched again.

use crate::agent::{EpisodeRecord, RunCheckpoint, StepRecord, TrainOverrides, Trainer};
use crate::config::RunConfig;
use crate::envs::EnvFamily;
use crate::error::{Error, Result};
use crate::eval::{
    collect_calibration, deploy_policy, pareto_rows, predict_cost_map, reliability_curve,
    risk_coverage, theorem1_check, contrast_error, entropy_error, gradient_mse, CostMap,
    DeployOutput, TheoremConfig, TheoremOutput,
};
use crate::rng::substream;
use rand_core::RngCore;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const MANIFEST_VERSION: u32 = 1;

/// Tail-bound reference configuration included in every training bundle:
/// the two-valued critic with unit span, masses 0.1 vs 0.5, 10 candidates.
pub fn reference_theorem_config() -> TheoremConfig {
    TheoremConfig {
        lower: 0.0,
        upper: 1.0,
        tau: 1.0,
        p_pi: 0.1,
        p_unif: 0.5,
        m: 10,
        temperature: 1.0,
        draws: 100_000,
    }
}

/// Output root: the `USC_OUT` environment variable when set and nonempty,
/// otherwise the configured directory.
pub fn output_root(configured: &str) -> PathBuf {
    match std::env::var("USC_OUT") {
        Ok(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(configured),
    }
}

/// First eight hex characters of the SHA-256 of a serialized document.
fn hash8<T: Serialize>(doc: &T) -> String {
    let canonical = serde_json::to_string(doc).expect("document serialization is infallible");
    let digest = Sha256::digest(canonical.as_bytes());
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Immutable per-run record: the resolved inputs, identity of the run, the
/// moment it started, and the artifact inventory it is expected to produce.
/// This is the only artifact carrying wall-clock time.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    /// Subcommand that produced the directory.
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub software_version: String,
    pub started_at_unix_ms: u64,
    pub expected_files: Vec<String>,
    pub config: serde_json::Value,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seed: u64,
    config_hash: &str,
    expected_files: &[&str],
    config: serde_json::Value,
) -> Result<()> {
    let started_at_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let manifest = RunManifest {
        format_version: MANIFEST_VERSION,
        command: command.to_string(),
        seed,
        config_hash: config_hash.to_string(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at_unix_ms,
        expected_files: expected_files.iter().map(|s| s.to_string()).collect(),
        config,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("serialize manifest: {e}")))?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV writers. All deterministic; '.' decimal separators come from Display.
// ---------------------------------------------------------------------------

pub fn training_csv(records: &[EpisodeRecord]) -> String {
    let mut out = String::from(
        "episode,layout_seed,reward,cost,success,lambda,mean_u,mean_u_tilde,safety_loss,\
         bellman_term,conservative_term,reward_loss,actor_loss,refine_loss,steps\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.episode,
            r.layout_seed,
            fmt(r.reward),
            fmt(r.cost),
            flag(r.success),
            fmt(r.lambda),
            fmt(r.mean_u),
            fmt(r.mean_u_tilde),
            fmt(r.safety_loss),
            fmt(r.bellman_term),
            fmt(r.conservative_term),
            fmt(r.reward_loss),
            fmt(r.actor_loss),
            fmt(r.refine_loss),
            r.steps
        ));
    }
    out
}

fn steps_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(
        "step,episode,t,reward,cost,mean_u,mean_u_tilde,safety_loss,reward_loss,actor_loss,refine_loss\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.episode,
            r.t,
            fmt(r.reward),
            fmt(r.cost),
            fmt(r.mean_u),
            fmt(r.mean_u_tilde),
            fmt(r.safety_loss),
            fmt(r.reward_loss),
            fmt(r.actor_loss),
            fmt(r.refine_loss)
        ));
    }
    out
}

fn deploy_csv(out: &DeployOutput) -> String {
    let mut text = String::from("episode,layout_seed,reward,cost,success,steps\n");
    for e in &out.episodes {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.episode,
            e.layout_seed,
            fmt(e.reward),
            fmt(e.cost),
            flag(e.success),
            e.steps
        ));
    }
    text
}

fn costmap_csv(map: &CostMap, half_width: f64) -> String {
    let g = map.resolution;
    let cell = 2.0 * half_width / g as f64;
    let mut text = String::from("ix,iy,x,y,predicted,truth\n");
    for iy in 0..g {
        for ix in 0..g {
            let x = -half_width + (ix as f64 + 0.5) * cell;
            let y = -half_width + (iy as f64 + 0.5) * cell;
            text.push_str(&format!(
                "{ix},{iy},{},{},{},{}\n",
                fmt(x),
                fmt(y),
                fmt(map.predicted[iy * g + ix]),
                fmt(map.truth[iy * g + ix])
            ));
        }
    }
    text
}

/// Long-format metric rows: stable regardless of which optional metrics a
/// particular run can compute.
fn metrics_csv(rows: &[(&str, f64)]) -> String {
    let mut text = String::from("metric,value\n");
    for (name, value) in rows {
        text.push_str(&format!("{name},{}\n", fmt(*value)));
    }
    text
}

fn theorem1_csv(cfg: &TheoremConfig, out: &TheoremOutput) -> String {
    let mut text = String::from(
        "p_pi,p_unif,m,tau,lower,upper,temperature,draws,gap_max,se_max,gap_lse,se_lse,bound,\
         lse_bound,expected_max_pi,expected_max_unif,emp_max_pi,emp_max_unif,pass_max,pass_lse,\
         low_precision\n",
    );
    text.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        fmt(cfg.p_pi),
        fmt(cfg.p_unif),
        cfg.m,
        fmt(cfg.tau),
        fmt(cfg.lower),
        fmt(cfg.upper),
        fmt(cfg.temperature),
        cfg.draws,
        fmt(out.gap_max),
        fmt(out.se_max),
        fmt(out.gap_lse),
        fmt(out.se_lse),
        fmt(out.bound),
        fmt(out.lse_bound),
        fmt(out.expected_max_pi),
        fmt(out.expected_max_unif),
        fmt(out.emp_max_pi),
        fmt(out.emp_max_unif),
        flag(out.pass_max),
        flag(out.pass_lse),
        flag(out.low_precision)
    ));
    text
}

fn pareto_csv(rows: &[crate::eval::ParetoRow]) -> String {
    let mut text = String::from("method,runs,mean_reward,std_reward,mean_cost,std_cost\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.runs,
            fmt(r.mean_reward),
            fmt(r.std_reward),
            fmt(r.mean_cost),
            fmt(r.std_cost)
        ));
    }
    text
}

fn reliability_csv(bins: &[crate::eval::ReliabilityBin]) -> String {
    let mut text = String::from("bin,mean_u,mean_error,count\n");
    for (k, b) in bins.iter().enumerate() {
        text.push_str(&format!("{k},{},{},{}\n", fmt(b.mean_u), fmt(b.mean_error), b.count));
    }
    text
}

fn risk_coverage_csv(points: &[crate::eval::RiskCoveragePoint]) -> String {
    let mut text = String::from("coverage,mean_error,count\n");
    for p in points {
        text.push_str(&format!("{},{},{}\n", fmt(p.coverage), fmt(p.mean_error), p.count));
    }
    text
}

// ---------------------------------------------------------------------------
// Training runs.
// ---------------------------------------------------------------------------

/// Everything a finished training run leaves behind, for callers that want
/// the in-memory results alongside the on-disk artifacts.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
    pub records: Vec<EpisodeRecord>,
    pub checkpoint: RunCheckpoint,
}

/// The layout used for a run's cost map and its first evaluation episode:
/// the first draw of the run's `env` substream.
pub fn costmap_layout_seed(seed: u64) -> u64 {
    substream(seed, "env").next_u64()
}

/// Trains one configured run to completion and writes its full artifact
/// bundle into `<output root>/<kind>-<config hash>-seed<seed>`.
pub fn train_run(cfg: &RunConfig, seed: u64) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let hash = cfg.hash_prefix();
    let kind = cfg.agent.kind;
    let dir = output_root(&cfg.output_dir).join(format!("{}-{hash}-seed{seed}", kind.label()));
    std::fs::create_dir_all(&dir)?;

    let uses_safety = kind.uses_safety_stack();
    let has_map = uses_safety && cfg.environment.family == EnvFamily::PointGoal;
    let mut expected: Vec<&str> =
        vec!["training.csv", "checkpoint.json", "deploy.csv", "theorem1.csv", "pareto.csv", "metrics.csv"];
    if cfg.agent.step_csv {
        expected.push("steps.csv");
    }
    if cfg.agent.dump_replay {
        expected.push("replay.csv");
    }
    if has_map {
        expected.push("costmap.csv");
    }
    if uses_safety {
        expected.push("reliability.csv");
        expected.push("risk_coverage.csv");
    }
    let config_value =
        serde_json::to_value(cfg).map_err(|e| Error::Parse(format!("serialize config: {e}")))?;
    write_manifest(&dir, "train", seed, &hash, &expected, config_value)?;

    // Train, snapshotting periodically so an interrupted run leaves a
    // usable checkpoint behind.
    let mut trainer = Trainer::new(cfg, seed, TrainOverrides::default())?;
    let mut records = Vec::with_capacity(cfg.agent.episodes);
    let every = cfg.agent.checkpoint_every;
    for ep in 0..cfg.agent.episodes {
        records.push(trainer.run_episode()?);
        if every > 0 && (ep + 1) % every == 0 && ep + 1 < cfg.agent.episodes {
            let json = trainer.checkpoint().to_json()?;
            std::fs::write(dir.join("checkpoint.json"), json)?;
        }
    }
    crate::agent::trainer_probe_dump();
    let checkpoint = trainer.checkpoint();
    std::fs::write(dir.join("checkpoint.json"), checkpoint.to_json()?)?;
    std::fs::write(dir.join("training.csv"), training_csv(&records))?;
    if cfg.agent.step_csv {
        std::fs::write(dir.join("steps.csv"), steps_csv(trainer.step_records()))?;
    }
    if cfg.agent.dump_replay {
        let mut buf = Vec::new();
        trainer.buffer().dump_csv(&mut buf)?;
        std::fs::write(dir.join("replay.csv"), buf)?;
    }

    write_eval_bundle(&dir, cfg, seed, &checkpoint, &records)?;
    Ok(TrainArtifacts { dir, records, checkpoint })
}

/// Writes the per-run evaluation report bundle next to the training
/// artifacts. Curve files that cannot be populated (no safety critic, or
/// fewer evaluation samples than bins) still appear with their header row
/// so the manifest inventory stays exact.
fn write_eval_bundle(
    dir: &Path,
    cfg: &RunConfig,
    seed: u64,
    checkpoint: &RunCheckpoint,
    records: &[EpisodeRecord],
) -> Result<()> {
    let mut env = cfg.environment.build()?;
    let deploy = deploy_policy(checkpoint, &mut env, cfg.eval.episodes, seed)?;
    std::fs::write(dir.join("deploy.csv"), deploy_csv(&deploy))?;

    let t_cfg = reference_theorem_config();
    let t_out = theorem1_check(&t_cfg, &mut substream(seed, "theorem-mc"))?;
    std::fs::write(dir.join("theorem1.csv"), theorem1_csv(&t_cfg, &t_out))?;

    let run_pairs = if records.is_empty() {
        vec![(0.0, 0.0)]
    } else {
        let n = records.len() as f64;
        let mr = records.iter().map(|r| r.reward).sum::<f64>() / n;
        let mc = records.iter().map(|r| r.cost).sum::<f64>() / n;
        vec![(mr, mc)]
    };
    let rows = pareto_rows(&[(cfg.agent.kind.label().to_string(), run_pairs)])?;
    std::fs::write(dir.join("pareto.csv"), pareto_csv(&rows))?;

    let mut metric_rows: Vec<(&str, f64)> = Vec::new();
    let uses_safety = cfg.agent.kind.uses_safety_stack();
    let has_map = uses_safety && cfg.environment.family == EnvFamily::PointGoal;

    if has_map {
        let actor = RunCheckpoint::network_from(&checkpoint.actor)?;
        let safety_doc = checkpoint
            .safety
            .as_ref()
            .expect("safety-stack methods checkpoint their safety critic");
        let safety = RunCheckpoint::network_from(safety_doc)?;
        env.reset(costmap_layout_seed(seed))?;
        let map = predict_cost_map(
            &actor,
            &safety,
            &env,
            cfg.eval.costmap_resolution,
            cfg.eval.costmap_action_probe,
        )?;
        let half_width = env.as_point_goal()?.config().arena_half_width;
        std::fs::write(dir.join("costmap.csv"), costmap_csv(&map, half_width))?;
        if let Ok(v) = gradient_mse(&map.predicted, &map.truth, map.resolution) {
            metric_rows.push(("gradient_mse", v));
        }
        if let Ok(v) = contrast_error(&map.predicted, &map.truth) {
            metric_rows.push(("contrast_error", v));
        }
        if let Ok(v) = entropy_error(&map.predicted, &map.truth) {
            metric_rows.push(("entropy_error", v));
        }
    }

    if uses_safety {
        let safety_doc = checkpoint
            .safety
            .as_ref()
            .expect("safety-stack methods checkpoint their safety critic");
        let safety = RunCheckpoint::network_from(safety_doc)?;
        let scope = cfg.agent.influence_scope.resolve(safety.spec.param_count());
        let have_steps = deploy.logs.iter().any(|l| !l.costs.is_empty());
        let calib = if have_steps {
            Some(collect_calibration(
                &safety,
                &deploy.logs,
                cfg.environment.discount,
                cfg.agent.gn_damping,
                scope,
            )?)
        } else {
            None
        };
        let bins = match &calib {
            Some(d) => match reliability_curve(d, cfg.eval.reliability_bins) {
                Ok(b) => b,
                Err(Error::State(_)) => Vec::new(),
                Err(e) => return Err(e),
            },
            None => Vec::new(),
        };
        std::fs::write(dir.join("reliability.csv"), reliability_csv(&bins))?;
        let points = match &calib {
            Some(d) => risk_coverage(d)?,
            None => Vec::new(),
        };
        std::fs::write(dir.join("risk_coverage.csv"), risk_coverage_csv(&points))?;
    }

    metric_rows.push(("deploy_mean_reward", deploy.aggregate.mean_reward));
    metric_rows.push(("deploy_std_reward", deploy.aggregate.std_reward));
    metric_rows.push(("deploy_mean_cost", deploy.aggregate.mean_cost));
    metric_rows.push(("deploy_std_cost", deploy.aggregate.std_cost));
    metric_rows.push(("deploy_success_rate", deploy.aggregate.success_rate));
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&metric_rows))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommand entry points.
// ---------------------------------------------------------------------------

pub fn cmd_train(config_path: &Path, seed: u64) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    Ok(train_run(&cfg, seed)?.dir)
}

fn load_checkpoint(path: &Path) -> Result<RunCheckpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Parse(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    RunCheckpoint::from_json(&text)
}

pub fn cmd_deploy(checkpoint_path: &Path, episodes: usize, seed: u64) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint_path)?;
    let hash = ck.config.hash_prefix();
    let dir = output_root(&ck.config.output_dir).join(format!("deploy-{hash}-seed{seed}"));
    std::fs::create_dir_all(&dir)?;
    let config_value = serde_json::to_value(&ck.config)
        .map_err(|e| Error::Parse(format!("serialize config: {e}")))?;
    write_manifest(&dir, "deploy", seed, &hash, &["deploy.csv", "metrics.csv"], config_value)?;

    let mut env = ck.config.environment.build()?;
    let out = deploy_policy(&ck, &mut env, episodes, seed)?;
    std::fs::write(dir.join("deploy.csv"), deploy_csv(&out))?;
    let rows = [
        ("deploy_mean_reward", out.aggregate.mean_reward),
        ("deploy_std_reward", out.aggregate.std_reward),
        ("deploy_mean_cost", out.aggregate.mean_cost),
        ("deploy_std_cost", out.aggregate.std_cost),
        ("deploy_success_rate", out.aggregate.success_rate),
    ];
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
    Ok(dir)
}

pub fn cmd_costmap(checkpoint_path: &Path, resolution: usize) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint_path)?;
    let Some(safety_doc) = ck.safety.as_ref() else {
        return Err(Error::Capability(
            "the checkpointed method trains no safety critic, so it has no cost map".into(),
        ));
    };
    let hash = ck.config.hash_prefix();
    let dir = output_root(&ck.config.output_dir).join(format!("costmap-{hash}-seed{}", ck.seed));
    std::fs::create_dir_all(&dir)?;
    let config_value = serde_json::to_value(&ck.config)
        .map_err(|e| Error::Parse(format!("serialize config: {e}")))?;
    write_manifest(&dir, "costmap", ck.seed, &hash, &["costmap.csv", "metrics.csv"], config_value)?;

    let actor = RunCheckpoint::network_from(&ck.actor)?;
    let safety = RunCheckpoint::network_from(safety_doc)?;
    let mut env = ck.config.environment.build()?;
    env.reset(costmap_layout_seed(ck.seed))?;
    let map = predict_cost_map(&actor, &safety, &env, resolution, ck.config.eval.costmap_action_probe)?;
    let half_width = env.as_point_goal()?.config().arena_half_width;
    std::fs::write(dir.join("costmap.csv"), costmap_csv(&map, half_width))?;

    let mut rows: Vec<(&str, f64)> = Vec::new();
    if let Ok(v) = gradient_mse(&map.predicted, &map.truth, map.resolution) {
        rows.push(("gradient_mse", v));
    }
    if let Ok(v) = contrast_error(&map.predicted, &map.truth) {
        rows.push(("contrast_error", v));
    }
    if let Ok(v) = entropy_error(&map.predicted, &map.truth) {
        rows.push(("entropy_error", v));
    }
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&rows))?;
    Ok(dir)
}

/// Runs the tail-bound check under the fixed master seed 0 (the check has
/// no run of its own to inherit a seed from) and writes its one-row report.
pub fn cmd_theorem1(cfg: &TheoremConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let hash = hash8(cfg);
    let dir = output_root("runs").join(format!("theorem1-{hash}-seed0"));
    std::fs::create_dir_all(&dir)?;
    let config_value =
        serde_json::to_value(cfg).map_err(|e| Error::Parse(format!("serialize config: {e}")))?;
    write_manifest(&dir, "theorem1", 0, &hash, &["theorem1.csv"], config_value)?;
    let out = theorem1_check(cfg, &mut substream(0, "theorem-mc"))?;
    std::fs::write(dir.join("theorem1.csv"), theorem1_csv(cfg, &out))?;
    Ok(dir)
}

/// Trains the first `k` configured seeds (concurrently, one worker per
/// available core) and writes an aggregated trade-off row next to the run
/// directories.
pub fn cmd_sweep(config_path: &Path, k: usize) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::load(config_path)?;
    if k == 0 {
        return Err(Error::InvalidInput("sweep needs at least one seed".into()));
    }
    if cfg.seeds.len() < k {
        return Err(Error::InvalidInput(format!(
            "sweep over {k} seeds requested but the configuration lists only {}",
            cfg.seeds.len()
        )));
    }
    let seeds: Vec<u64> = cfg.seeds[..k].to_vec();
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(k);

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<TrainArtifacts>>>> = Mutex::new((0..k).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let result = train_run(&cfg, seeds[i]);
                slots.lock().expect("sweep results poisoned")[i] = Some(result);
            });
        }
    });

    let results = slots.into_inner().expect("sweep results poisoned");
    let mut dirs = Vec::with_capacity(k);
    let mut pairs = Vec::with_capacity(k);
    for slot in results {
        let artifacts = slot.expect("every sweep slot is claimed")?;
        let n = artifacts.records.len() as f64;
        let pair = if artifacts.records.is_empty() {
            (0.0, 0.0)
        } else {
            (
                artifacts.records.iter().map(|r| r.reward).sum::<f64>() / n,
                artifacts.records.iter().map(|r| r.cost).sum::<f64>() / n,
            )
        };
        pairs.push(pair);
        dirs.push(artifacts.dir);
    }
    let rows = pareto_rows(&[(cfg.agent.kind.label().to_string(), pairs)])?;
    let root = output_root(&cfg.output_dir);
    std::fs::create_dir_all(&root)?;
    std::fs::write(
        root.join(format!("sweep-{}-pareto.csv", cfg.hash_prefix())),
        pareto_csv(&rows),
    )?;
    Ok(dirs)
}
