//! Predictive cost maps over the 2-D arena and the three comparison
//! metrics between a predicted map and the ground-truth contact-cost field.
//!
//! All metrics operate on min–max-normalized maps, so they are invariant to
//! positive affine rescaling of the prediction: only the *shape* of the
//! predicted field is scored, not its absolute calibration.

use crate::diffnet::{forward_into, Network, Workspace};
use crate::envs::Env;
use crate::error::{Error, Result};

/// A `resolution × resolution` grid of predicted costs over the arena
/// (row-major, y outer, x inner, values at cell centers) paired with the
/// ground-truth contact-cost field on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub resolution: usize,
    /// Predicted cost per cell: the safety critic at the cell-center
    /// observation and the policy's action there.
    pub predicted: Vec<f64>,
    /// Instantaneous contact cost at each cell center.
    pub truth: Vec<f64>,
}

/// The three map-comparison scores. All are nonnegative; zero means the
/// normalized prediction matches the normalized truth in that respect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapMetrics {
    pub gradient_mse: f64,
    pub contrast_error: f64,
    pub entropy_error: f64,
}

impl MapMetrics {
    /// All three metrics of one map. Requires `resolution ≥ 3` (for interior
    /// gradients) and a truth field containing both hazardous and safe cells.
    pub fn from_map(map: &CostMap) -> Result<MapMetrics> {
        Ok(MapMetrics {
            gradient_mse: gradient_mse(&map.predicted, &map.truth, map.resolution)?,
            contrast_error: contrast_error(&map.predicted, &map.truth)?,
            entropy_error: entropy_error(&map.predicted, &map.truth)?,
        })
    }
}

/// Fixed probe directions for the action-reduction flag: the 8 compass
/// points of the unit circle.
const PROBE_ACTIONS: [[f64; 2]; 8] = [
    [1.0, 0.0],
    [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
    [0.0, 1.0],
    [-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
    [-1.0, 0.0],
    [-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2],
    [0.0, -1.0],
    [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2],
];

/// Evaluates the safety critic across a `resolution × resolution` grid of
/// cell centers under the current arena layout.
///
/// Per cell the observation is synthesized at the cell center and the critic
/// scores the policy's action there; with `action_probe` the score is
/// instead the minimum over the 8 fixed probe directions (a policy-free
/// lower envelope). Cell-center placement matches the ground-truth field:
/// `-half_width + (index + 0.5) · cell_size`, row-major with y outer.
pub fn predict_cost_map(
    actor: &Network,
    safety: &Network,
    env: &Env,
    resolution: usize,
    action_probe: bool,
) -> Result<CostMap> {
    let pg = env.as_point_goal()?;
    if resolution == 0 {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    let obs_dim = env.spec().obs_dim;
    let action_dim = env.spec().action_dim;
    if actor.spec.input_dim() != obs_dim || actor.spec.output_dim() != action_dim {
        return Err(Error::InvalidInput(format!(
            "actor shape {}→{} does not fit the task ({obs_dim}→{action_dim})",
            actor.spec.input_dim(),
            actor.spec.output_dim()
        )));
    }
    if safety.spec.input_dim() != obs_dim + action_dim || safety.spec.output_dim() != 1 {
        return Err(Error::InvalidInput(format!(
            "safety critic shape {}→{} does not fit the task ({}→1)",
            safety.spec.input_dim(),
            safety.spec.output_dim(),
            obs_dim + action_dim
        )));
    }
    if action_probe && action_dim != 2 {
        return Err(Error::Capability(format!(
            "the probe set is planar; the task has {action_dim} action dimensions"
        )));
    }

    let truth = pg.ground_truth_cost_field(resolution)?;
    let hw = pg.config().arena_half_width;
    let cell = 2.0 * hw / resolution as f64;

    let mut actor_ws = Workspace::for_spec(&actor.spec);
    let mut critic_ws = Workspace::for_spec(&safety.spec);
    let mut input = vec![0.0; obs_dim + action_dim];
    let mut predicted = Vec::with_capacity(resolution * resolution);

    for iy in 0..resolution {
        let y = -hw + (iy as f64 + 0.5) * cell;
        for ix in 0..resolution {
            let x = -hw + (ix as f64 + 0.5) * cell;
            let obs = pg.observation_at([x, y]);
            input[..obs_dim].copy_from_slice(&obs);
            let value = if action_probe {
                let mut best = f64::INFINITY;
                for probe in &PROBE_ACTIONS {
                    input[obs_dim..].copy_from_slice(probe);
                    forward_into(&safety.spec, &safety.params, &input, &mut critic_ws)?;
                    best = best.min(critic_ws.output()[0]);
                }
                best
            } else {
                forward_into(&actor.spec, &actor.params, &obs, &mut actor_ws)?;
                input[obs_dim..].copy_from_slice(actor_ws.output());
                forward_into(&safety.spec, &safety.params, &input, &mut critic_ws)?;
                critic_ws.output()[0]
            };
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite predicted cost at cell ({ix}, {iy})"
                )));
            }
            predicted.push(value);
        }
    }

    Ok(CostMap { resolution, predicted, truth })
}

/// Min–max normalization to [0, 1]; a constant map becomes all zeros.
fn normalize(map: &[f64]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|&v| (v - lo) / span).collect()
}

fn check_grids(pred: &[f64], truth: &[f64], resolution: usize) -> Result<()> {
    let n = resolution * resolution;
    if pred.len() != n || truth.len() != n {
        return Err(Error::InvalidInput(format!(
            "grids must both hold {n} cells, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Mean squared difference of central-difference gradient vectors between
/// the min–max-normalized maps, over interior cells (unit cell spacing):
///
/// `mean over 1 ≤ ix, iy ≤ G−2 of (∂x p − ∂x t)² + (∂y p − ∂y t)²`,
/// with `∂x m = (m[iy][ix+1] − m[iy][ix−1]) / 2` and likewise for y.
pub fn gradient_mse(pred: &[f64], truth: &[f64], resolution: usize) -> Result<f64> {
    if resolution < 3 {
        return Err(Error::InvalidInput(format!(
            "gradients need interior cells, so resolution must be ≥ 3, got {resolution}"
        )));
    }
    check_grids(pred, truth, resolution)?;
    let p = normalize(pred);
    let t = normalize(truth);
    let g = resolution;
    let at = |m: &[f64], ix: usize, iy: usize| m[iy * g + ix];

    let mut sum = 0.0;
    for iy in 1..g - 1 {
        for ix in 1..g - 1 {
            let pgx = (at(&p, ix + 1, iy) - at(&p, ix - 1, iy)) / 2.0;
            let pgy = (at(&p, ix, iy + 1) - at(&p, ix, iy - 1)) / 2.0;
            let tgx = (at(&t, ix + 1, iy) - at(&t, ix - 1, iy)) / 2.0;
            let tgy = (at(&t, ix, iy + 1) - at(&t, ix, iy - 1)) / 2.0;
            let dx = pgx - tgx;
            let dy = pgy - tgy;
            sum += dx * dx + dy * dy;
        }
    }
    let interior = ((g - 2) * (g - 2)) as f64;
    Ok(sum / interior)
}

/// Separation score difference. For each min–max-normalized map,
/// `contrast = mean over hazard cells − mean over safe cells`, where the
/// hazard/safe partition comes from the truth field (`truth > 0` vs
/// `truth == 0`); returns `|contrast(pred) − contrast(truth)|`.
pub fn contrast_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!(
            "grids must be congruent and nonempty, got {} and {} cells",
            pred.len(),
            truth.len()
        )));
    }
    let hazard_count = truth.iter().filter(|&&v| v > 0.0).count();
    if hazard_count == 0 || hazard_count == truth.len() {
        return Err(Error::InvalidInput(
            "contrast needs both hazardous and safe cells in the truth field".into(),
        ));
    }
    let p = normalize(pred);
    let t = normalize(truth);
    let contrast = |m: &[f64]| {
        let mut hz = 0.0;
        let mut sf = 0.0;
        for (v, &tv) in m.iter().zip(truth.iter()) {
            if tv > 0.0 {
                hz += v;
            } else {
                sf += v;
            }
        }
        hz / hazard_count as f64 - sf / (truth.len() - hazard_count) as f64
    };
    Ok((contrast(&p) - contrast(&t)).abs())
}

/// Shannon entropy (natural log) of a map viewed as a distribution: the map
/// is shifted by its minimum and normalized to sum 1; an all-zero shifted
/// map is defined as uniform.
fn map_entropy(map: &[f64]) -> f64 {
    let lo = map.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let total: f64 = map.iter().map(|&v| v - lo).sum();
    if !(total > 0.0) {
        return (map.len() as f64).ln();
    }
    let mut h = 0.0;
    for &v in map {
        let pmass = (v - lo) / total;
        if pmass > 0.0 {
            h -= pmass * pmass.ln();
        }
    }
    h
}

/// Absolute difference of map entropies: how much more (or less)
/// concentrated the predicted hazard mass is than the true one.
pub fn entropy_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!(
            "grids must be congruent and nonempty, got {} and {} cells",
            pred.len(),
            truth.len()
        )));
    }
    Ok((map_entropy(pred) - map_entropy(truth)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvironmentConfig;
    use crate::diffnet::{Activation, NetworkSpec};
    use crate::rng::{substream, uniform_range};

    fn test_env() -> Env {
        let cfg: EnvironmentConfig =
            serde_json::from_str(r#"{"point_goal": {"hazard_count": 3}}"#).unwrap();
        let mut env = cfg.build().unwrap();
        env.reset(42).unwrap();
        env
    }

    fn test_networks(env: &Env) -> (Network, Network) {
        let obs = env.spec().obs_dim;
        let act = env.spec().action_dim;
        let actor_spec =
            NetworkSpec::mlp(obs, &[8], act, Activation::Relu, Activation::Tanh).unwrap();
        let critic_spec =
            NetworkSpec::mlp(obs + act, &[8], 1, Activation::Relu, Activation::Identity).unwrap();
        let mut rng = substream(7, "costmap-test");
        let actor = Network::init_uniform(actor_spec, &mut rng).unwrap();
        let critic = Network::init_uniform(critic_spec, &mut rng).unwrap();
        (actor, critic)
    }

    #[test]
    fn constant_critic_fills_every_cell_with_its_constant() {
        let env = test_env();
        let (actor, mut critic) = test_networks(&env);
        // Zero all parameters except the output bias: the network then
        // computes that bias everywhere.
        critic.params.flat.iter_mut().for_each(|v| *v = 0.0);
        let last = critic.params.flat.len() - 1;
        critic.params.flat[last] = 3.25;
        let map = predict_cost_map(&actor, &critic, &env, 5, false).unwrap();
        assert_eq!(map.predicted.len(), 25);
        assert!(map.predicted.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn single_cell_map_sits_at_the_arena_center() {
        let env = test_env();
        let (actor, critic) = test_networks(&env);
        let map = predict_cost_map(&actor, &critic, &env, 1, false).unwrap();
        assert_eq!(map.predicted.len(), 1);

        // Recompute the center-cell value by hand.
        let pg = env.as_point_goal().unwrap();
        let obs = pg.observation_at([0.0, 0.0]);
        let mut ws = Workspace::for_spec(&actor.spec);
        forward_into(&actor.spec, &actor.params, &obs, &mut ws).unwrap();
        let mut input = obs.clone();
        input.extend_from_slice(ws.output());
        let mut cws = Workspace::for_spec(&critic.spec);
        forward_into(&critic.spec, &critic.params, &input, &mut cws).unwrap();
        assert_eq!(map.predicted[0], cws.output()[0]);
        assert_eq!(map.truth[0], pg.instantaneous_cost([0.0, 0.0]));
    }

    #[test]
    fn map_matches_cell_by_cell_recomputation() {
        let env = test_env();
        let (actor, critic) = test_networks(&env);
        let g = 9;
        let map = predict_cost_map(&actor, &critic, &env, g, false).unwrap();

        let pg = env.as_point_goal().unwrap();
        let hw = pg.config().arena_half_width;
        let cell = 2.0 * hw / g as f64;
        let mut aws = Workspace::for_spec(&actor.spec);
        let mut cws = Workspace::for_spec(&critic.spec);
        for iy in 0..g {
            for ix in 0..g {
                let pos = [-hw + (ix as f64 + 0.5) * cell, -hw + (iy as f64 + 0.5) * cell];
                let obs = pg.observation_at(pos);
                forward_into(&actor.spec, &actor.params, &obs, &mut aws).unwrap();
                let mut input = obs.clone();
                input.extend_from_slice(aws.output());
                forward_into(&critic.spec, &critic.params, &input, &mut cws).unwrap();
                assert_eq!(map.predicted[iy * g + ix], cws.output()[0], "cell ({ix}, {iy})");
                assert_eq!(map.truth[iy * g + ix], pg.instantaneous_cost(pos));
            }
        }
    }

    #[test]
    fn probe_reduction_takes_the_minimum_over_directions() {
        let env = test_env();
        let (actor, critic) = test_networks(&env);
        let map = predict_cost_map(&actor, &critic, &env, 4, true).unwrap();

        let pg = env.as_point_goal().unwrap();
        let hw = pg.config().arena_half_width;
        let cell = 2.0 * hw / 4.0;
        let mut cws = Workspace::for_spec(&critic.spec);
        for iy in 0..4 {
            for ix in 0..4 {
                let pos = [-hw + (ix as f64 + 0.5) * cell, -hw + (iy as f64 + 0.5) * cell];
                let obs = pg.observation_at(pos);
                let mut best = f64::INFINITY;
                for probe in &PROBE_ACTIONS {
                    let mut input = obs.clone();
                    input.extend_from_slice(probe);
                    forward_into(&critic.spec, &critic.params, &input, &mut cws).unwrap();
                    best = best.min(cws.output()[0]);
                }
                assert_eq!(map.predicted[iy * 4 + ix], best);
            }
        }
    }

    #[test]
    fn velocity_task_has_no_map() {
        let cfg: EnvironmentConfig =
            serde_json::from_str(r#"{"family": "velocity_limit"}"#).unwrap();
        let mut env = cfg.build().unwrap();
        env.reset(1).unwrap();
        let e = {
            let pg_env = test_env();
            let (actor, critic) = {
                // Networks sized for the velocity task so the shape check
                // is not what trips.
                let obs = env.spec().obs_dim;
                let act = env.spec().action_dim;
                let a = NetworkSpec::mlp(obs, &[4], act, Activation::Relu, Activation::Tanh)
                    .unwrap();
                let c = NetworkSpec::mlp(obs + act, &[4], 1, Activation::Relu, Activation::Identity)
                    .unwrap();
                let mut rng = substream(1, "vel-map-test");
                (
                    Network::init_uniform(a, &mut rng).unwrap(),
                    Network::init_uniform(c, &mut rng).unwrap(),
                )
            };
            drop(pg_env);
            predict_cost_map(&actor, &critic, &env, 4, false).unwrap_err()
        };
        assert_eq!(e.class(), "capability");
    }

    #[test]
    fn identical_maps_score_zero_on_all_three_metrics() {
        let env = test_env();
        let pg = env.as_point_goal().unwrap();
        let truth = pg.ground_truth_cost_field(16).unwrap();
        assert!(truth.iter().any(|&v| v > 0.0), "layout must contain hazard cells");
        let map = CostMap { resolution: 16, predicted: truth.clone(), truth };
        let m = MapMetrics::from_map(&map).unwrap();
        assert_eq!(m.gradient_mse, 0.0);
        assert_eq!(m.contrast_error, 0.0);
        assert_eq!(m.entropy_error, 0.0);
    }

    #[test]
    fn metrics_ignore_positive_affine_rescaling() {
        let env = test_env();
        let pg = env.as_point_goal().unwrap();
        let truth = pg.ground_truth_cost_field(12).unwrap();
        let mut rng = substream(3, "affine-test");
        let pred: Vec<f64> = (0..truth.len()).map(|_| uniform_range(&mut rng, -1.0, 2.0)).collect();

        let base = (
            gradient_mse(&pred, &truth, 12).unwrap(),
            contrast_error(&pred, &truth).unwrap(),
            entropy_error(&pred, &truth).unwrap(),
        );
        for _ in 0..20 {
            let a = uniform_range(&mut rng, 0.1, 50.0);
            let b = uniform_range(&mut rng, -30.0, 30.0);
            let scaled: Vec<f64> = pred.iter().map(|&v| a * v + b).collect();
            let g = gradient_mse(&scaled, &truth, 12).unwrap();
            let c = contrast_error(&scaled, &truth).unwrap();
            let h = entropy_error(&scaled, &truth).unwrap();
            assert!((g - base.0).abs() < 1e-9, "{g} vs {}", base.0);
            assert!((c - base.1).abs() < 1e-9, "{c} vs {}", base.1);
            assert!((h - base.2).abs() < 1e-9, "{h} vs {}", base.2);
        }
    }

    #[test]
    fn constant_prediction_scores_the_truth_gradient_mass() {
        // With a constant prediction (normalizes to all zeros) the metric
        // reduces to the mean squared truth-gradient magnitude.
        let g = 8;
        let mut truth = vec![0.0; g * g];
        truth[3 * g + 4] = 2.0;
        truth[3 * g + 5] = 2.0;
        let pred = vec![7.0; g * g];
        let metric = gradient_mse(&pred, &truth, g).unwrap();

        let t = normalize(&truth);
        let mut sum = 0.0;
        for iy in 1..g - 1 {
            for ix in 1..g - 1 {
                let gx = (t[iy * g + ix + 1] - t[iy * g + ix - 1]) / 2.0;
                let gy = (t[(iy + 1) * g + ix] - t[(iy - 1) * g + ix]) / 2.0;
                sum += gx * gx + gy * gy;
            }
        }
        let expected = sum / ((g - 2) * (g - 2)) as f64;
        assert!((metric - expected).abs() < 1e-15, "{metric} vs {expected}");
        assert!(metric > 0.0);
    }

    #[test]
    fn tiny_grids_cannot_produce_gradients() {
        let pred = vec![0.0; 4];
        let truth = vec![1.0, 0.0, 0.0, 0.0];
        let err = gradient_mse(&pred, &truth, 2).unwrap_err();
        assert_eq!(err.class(), "invalid_input");
    }

    #[test]
    fn constant_prediction_has_zero_contrast() {
        let truth = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let pred = vec![5.0; 6];
        let e = contrast_error(&pred, &truth).unwrap();
        // contrast(truth) on the normalized truth is 1 − 0 = 1.
        assert!((e - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_level_prediction_matches_hand_arithmetic() {
        // Truth: cells 0,1 hazardous; 2,3 safe. Prediction: 3 on the first
        // hazard cell, 1 elsewhere → normalized pred = [1, 0, 0, 0].
        // contrast(pred) = (1+0)/2 − (0+0)/2 = 0.5; contrast(truth) = 1.
        let truth = vec![2.0, 2.0, 0.0, 0.0];
        let pred = vec![3.0, 1.0, 1.0, 1.0];
        let e = contrast_error(&pred, &truth).unwrap();
        assert!((e - 0.5).abs() < 1e-15, "{e}");
    }

    #[test]
    fn contrast_requires_both_partitions() {
        let all_hazard = vec![1.0, 2.0];
        let all_safe = vec![0.0, 0.0];
        let pred = vec![0.0, 1.0];
        assert!(contrast_error(&pred, &all_hazard).is_err());
        assert!(contrast_error(&pred, &all_safe).is_err());
    }

    #[test]
    fn uniform_versus_point_mass_entropy_gap_is_two_log_g() {
        let g = 6;
        let pred = vec![4.0; g * g];
        let mut truth = vec![0.0; g * g];
        truth[14] = 9.0;
        let e = entropy_error(&pred, &truth).unwrap();
        let expected = 2.0 * (g as f64).ln();
        assert!((e - expected).abs() < 1e-12, "{e} vs {expected}");
    }

    #[test]
    fn entropy_matches_direct_recomputation() {
        let mut rng = substream(11, "entropy-test");
        let map: Vec<f64> = (0..50).map(|_| uniform_range(&mut rng, -2.0, 5.0)).collect();
        let lo = map.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let total: f64 = map.iter().map(|v| v - lo).sum();
        let mut expected = 0.0;
        for &v in &map {
            let p = (v - lo) / total;
            if p > 0.0 {
                expected -= p * p.ln();
            }
        }
        assert!((map_entropy(&map) - expected).abs() < 1e-12);
    }
}
