//! Uncertainty calibration: does a higher influence score actually predict
//! a larger cost-prediction error?
//!
//! Each calibration sample pairs the influence score `u` of one visited
//! state–action with the critic's absolute error against the *realized*
//! discounted cost-to-go of that visit — computed from the full recorded
//! trajectory, never from bootstrapped values. The curves built here answer
//! two questions: do errors grow across uncertainty quantiles (reliability),
//! and does discarding the least-confident predictions reduce the retained
//! error (risk–coverage)?

use crate::diffnet::{forward_into, Network, Workspace};
use crate::error::{Error, Result};
use crate::eval::deploy::RolloutLog;
use crate::uncertainty::{scoped_grad_row, scope_range, InfluenceEstimator, InfluenceScope};

/// Maximum number of gradient rows used for the curvature reference; longer
/// rollouts are subsampled with an even stride.
pub const CALIBRATION_REFERENCE_ROWS: usize = 256;

/// Paired (influence score, absolute cost-prediction error) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationData {
    pub u: Vec<f64>,
    pub error: Vec<f64>,
}

impl CalibrationData {
    pub fn new(u: Vec<f64>, error: Vec<f64>) -> Result<Self> {
        if u.len() != error.len() {
            return Err(Error::InvalidInput(format!(
                "calibration pairs must align: {} scores vs {} errors",
                u.len(),
                error.len()
            )));
        }
        for (&a, &b) in u.iter().zip(error.iter()) {
            if !a.is_finite() || a < 0.0 || !b.is_finite() || b < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "calibration pairs must be finite and nonnegative, got ({a}, {b})"
                )));
            }
        }
        Ok(CalibrationData { u, error })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// One equal-count uncertainty bin of the reliability curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    pub mean_u: f64,
    pub mean_error: f64,
    pub count: usize,
}

/// One point of the risk–coverage curve: mean error over the `coverage`
/// fraction of most-confident samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCoveragePoint {
    pub coverage: f64,
    pub mean_error: f64,
    pub count: usize,
}

/// Realized discounted cost-to-go at every step of one episode, computed
/// backwards over the full recorded cost sequence.
fn discounted_cost_to_go(costs: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; costs.len()];
    let mut acc = 0.0;
    for (i, &c) in costs.iter().enumerate().rev() {
        acc = c + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Builds calibration pairs from recorded evaluation rollouts.
///
/// Errors are `|Q_C(s_t, a_t) − Σ_k γ^k c_{t+k}|` against the realized
/// discounted cost of the log itself. Influence scores are computed against
/// a curvature reference assembled from the pooled rollout steps (evenly
/// strided down to at most [`CALIBRATION_REFERENCE_ROWS`] gradient rows).
pub fn collect_calibration(
    safety: &Network,
    logs: &[RolloutLog],
    gamma: f64,
    damping: f64,
    scope: InfluenceScope,
) -> Result<CalibrationData> {
    if logs.iter().all(|l| l.costs.is_empty()) {
        return Err(Error::InvalidInput(
            "calibration needs at least one recorded step".into(),
        ));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    let in_dim = safety.spec.input_dim();
    let mut ws = Workspace::for_spec(&safety.spec);
    let mut grad_buf = vec![0.0; safety.spec.param_count()];
    let (_, scope_len) = scope_range(&safety.spec, scope);

    // Pool every visited (s, a) with its prediction and realized label.
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut errors: Vec<f64> = Vec::new();
    for log in logs {
        if log.observations.len() != log.costs.len() || log.actions.len() != log.costs.len() {
            return Err(Error::InvalidInput(format!(
                "rollout log is ragged: {} observations, {} actions, {} costs",
                log.observations.len(),
                log.actions.len(),
                log.costs.len()
            )));
        }
        let labels = discounted_cost_to_go(&log.costs, gamma);
        for t in 0..log.costs.len() {
            let mut input = Vec::with_capacity(in_dim);
            input.extend_from_slice(&log.observations[t]);
            input.extend_from_slice(&log.actions[t]);
            if input.len() != in_dim {
                return Err(Error::InvalidInput(format!(
                    "logged step has {} features, critic expects {in_dim}",
                    input.len()
                )));
            }
            forward_into(&safety.spec, &safety.params, &input, &mut ws)?;
            errors.push((ws.output()[0] - labels[t]).abs());
            inputs.push(input);
        }
    }

    // Curvature reference: an even stride over the pooled steps.
    let n = inputs.len();
    let m = n.min(CALIBRATION_REFERENCE_ROWS);
    let mut ref_rows = vec![0.0; m * scope_len];
    for i in 0..m {
        let src = (i * n) / m;
        scoped_grad_row(
            &safety.spec,
            &safety.params,
            &inputs[src],
            scope,
            &mut ws,
            &mut grad_buf,
            &mut ref_rows[i * scope_len..(i + 1) * scope_len],
        )?;
    }
    let estimator = InfluenceEstimator::from_rows(ref_rows, m, scope_len, damping)?;

    let mut u = Vec::with_capacity(n);
    let mut row = vec![0.0; scope_len];
    for input in &inputs {
        scoped_grad_row(&safety.spec, &safety.params, input, scope, &mut ws, &mut grad_buf, &mut row)?;
        u.push(estimator.query_influence(&row)?);
    }
    CalibrationData::new(u, errors)
}

/// Indices of `values` in ascending order (stable, so equal scores keep
/// their original relative order).
fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite scores"));
    idx
}

/// Equal-count reliability curve: sorts by uncertainty and splits into
/// `n_bins` quantile bins (bin `k` covers sorted positions
/// `⌊kN/bins⌋ .. ⌊(k+1)N/bins⌋`), reporting per-bin mean uncertainty and
/// mean error.
pub fn reliability_curve(data: &CalibrationData, n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if n_bins == 0 {
        return Err(Error::InvalidInput("reliability curve needs at least one bin".into()));
    }
    let n = data.len();
    if n < n_bins {
        return Err(Error::State(format!(
            "reliability curve needs at least {n_bins} samples, got {n}"
        )));
    }
    let order = ascending_order(&data.u);
    let mut bins = Vec::with_capacity(n_bins);
    for k in 0..n_bins {
        let lo = k * n / n_bins;
        let hi = (k + 1) * n / n_bins;
        let count = hi - lo;
        let mut su = 0.0;
        let mut se = 0.0;
        for &idx in &order[lo..hi] {
            su += data.u[idx];
            se += data.error[idx];
        }
        bins.push(ReliabilityBin {
            mean_u: su / count as f64,
            mean_error: se / count as f64,
            count,
        });
    }
    Ok(bins)
}

/// Risk–coverage curve: sorts ascending by uncertainty and reports, for
/// coverage q ∈ {0.1, …, 1.0}, the mean error over the first ⌈qN⌉ samples.
/// The full-coverage point is the unconditional mean error.
pub fn risk_coverage(data: &CalibrationData) -> Result<Vec<RiskCoveragePoint>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidInput("risk–coverage needs at least one sample".into()));
    }
    let order = ascending_order(&data.u);
    let mut points = Vec::with_capacity(10);
    let mut prefix = 0.0;
    let mut taken = 0usize;
    for dec in 1..=10usize {
        let take = (dec * n).div_ceil(10);
        while taken < take {
            prefix += data.error[order[taken]];
            taken += 1;
        }
        let mean = if dec == 10 {
            // Summed in original order so the full-coverage point equals
            // the unconditional mean bit for bit.
            data.error.iter().sum::<f64>() / n as f64
        } else {
            prefix / take as f64
        };
        points.push(RiskCoveragePoint {
            coverage: dec as f64 / 10.0,
            mean_error: mean,
            count: take,
        });
    }
    Ok(points)
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either sequence is constant (no monotone association to measure).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "rank correlation needs two aligned sequences of length ≥ 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("rank correlation needs finite values".into()));
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let order = ascending_order(vals);
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            // Positions i..=j share one value; each gets the average rank.
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Activation, NetworkSpec};
    use crate::rng::{substream, uniform_range};

    fn data(u: Vec<f64>, error: Vec<f64>) -> CalibrationData {
        CalibrationData::new(u, error).unwrap()
    }

    #[test]
    fn pairs_must_align_and_be_nonnegative() {
        assert!(CalibrationData::new(vec![1.0], vec![]).is_err());
        assert!(CalibrationData::new(vec![-0.1], vec![0.0]).is_err());
        assert!(CalibrationData::new(vec![0.1], vec![f64::NAN]).is_err());
        assert!(CalibrationData::new(vec![0.1, 0.2], vec![0.0, 3.0]).is_ok());
    }

    #[test]
    fn zero_errors_give_zero_bin_errors() {
        let mut rng = substream(1, "rel-test");
        let u: Vec<f64> = (0..40).map(|_| uniform_range(&mut rng, 0.0, 5.0)).collect();
        let d = data(u, vec![0.0; 40]);
        for bin in reliability_curve(&d, 10).unwrap() {
            assert_eq!(bin.mean_error, 0.0);
            assert_eq!(bin.count, 4);
        }
    }

    #[test]
    fn identity_pairing_gives_matching_bin_means() {
        let mut rng = substream(2, "rel-test");
        let u: Vec<f64> = (0..55).map(|_| uniform_range(&mut rng, 0.0, 2.0)).collect();
        let d = data(u.clone(), u);
        for bin in reliability_curve(&d, 5).unwrap() {
            assert!((bin.mean_u - bin.mean_error).abs() < 1e-15);
        }
    }

    #[test]
    fn monotone_data_ranks_perfectly_across_bins() {
        // Error grows with uncertainty → bin index vs bin error correlates
        // with ρ = 1.
        let n = 100;
        let u: Vec<f64> = (0..n).map(|i| i as f64 / 10.0).collect();
        let e: Vec<f64> = (0..n).map(|i| (i as f64).sqrt()).collect();
        let bins = reliability_curve(&data(u, e), 10).unwrap();
        let idx: Vec<f64> = (0..bins.len()).map(|k| k as f64).collect();
        let errs: Vec<f64> = bins.iter().map(|b| b.mean_error).collect();
        let rho = spearman(&idx, &errs).unwrap();
        assert!((rho - 1.0).abs() < 1e-12, "{rho}");
    }

    #[test]
    fn bins_partition_with_quantile_boundaries() {
        let n = 103;
        let mut rng = substream(3, "rel-test");
        let u: Vec<f64> = (0..n).map(|_| uniform_range(&mut rng, 0.0, 1.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| uniform_range(&mut rng, 0.0, 1.0)).collect();
        let bins = reliability_curve(&data(u, e), 10).unwrap();
        assert_eq!(bins.len(), 10);
        let total: usize = bins.iter().map(|b| b.count).sum();
        assert_eq!(total, n);
        for (k, b) in bins.iter().enumerate() {
            assert_eq!(b.count, (k + 1) * n / 10 - k * n / 10);
        }
        // Quantile ordering: bin mean uncertainties are nondecreasing.
        for w in bins.windows(2) {
            assert!(w[0].mean_u <= w[1].mean_u);
        }
    }

    #[test]
    fn too_few_samples_is_a_state_error() {
        let d = data(vec![0.1, 0.2], vec![0.0, 0.0]);
        assert_eq!(reliability_curve(&d, 3).unwrap_err().class(), "state");
        assert_eq!(reliability_curve(&d, 0).unwrap_err().class(), "invalid_input");
    }

    #[test]
    fn full_coverage_point_is_the_unconditional_mean() {
        let mut rng = substream(4, "risk-test");
        let n = 37;
        let u: Vec<f64> = (0..n).map(|_| uniform_range(&mut rng, 0.0, 1.0)).collect();
        let e: Vec<f64> = (0..n).map(|_| uniform_range(&mut rng, 0.0, 9.0)).collect();
        let d = data(u, e.clone());
        let curve = risk_coverage(&d).unwrap();
        assert_eq!(curve.len(), 10);
        let last = curve.last().unwrap();
        assert_eq!(last.coverage, 1.0);
        assert_eq!(last.count, n);
        assert_eq!(last.mean_error, e.iter().sum::<f64>() / n as f64);
    }

    #[test]
    fn identity_errors_make_the_curve_nondecreasing() {
        let mut rng = substream(5, "risk-test");
        let u: Vec<f64> = (0..200).map(|_| uniform_range(&mut rng, 0.0, 3.0)).collect();
        let d = data(u.clone(), u);
        let curve = risk_coverage(&d).unwrap();
        for w in curve.windows(2) {
            assert!(w[0].mean_error <= w[1].mean_error, "{w:?}");
        }
    }

    #[test]
    fn prefix_means_match_a_brute_force_oracle() {
        use rand_core::RngCore;
        let mut rng = substream(6, "risk-test");
        for trial in 0..25 {
            let n = 1 + (substream(trial, "n-pick").next_u64() % 60) as usize;
            let u: Vec<f64> = (0..n).map(|_| uniform_range(&mut rng, 0.0, 1.0)).collect();
            let e: Vec<f64> = (0..n).map(|_| uniform_range(&mut rng, 0.0, 5.0)).collect();
            let d = data(u.clone(), e.clone());
            let curve = risk_coverage(&d).unwrap();

            // Oracle: sort pairs by u (stable), recompute each prefix mean.
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| u[i].partial_cmp(&u[j]).unwrap());
            for (dec, point) in curve.iter().enumerate() {
                let take = ((dec + 1) * n).div_ceil(10);
                assert_eq!(point.count, take);
                let mean: f64 = idx[..take].iter().map(|&i| e[i]).sum::<f64>() / take as f64;
                assert!((point.mean_error - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spearman_handles_monotone_reversed_and_tied_data() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&xs, &[8.0, 6.0, 4.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
        // Tied middle pair: ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        // gives ρ = √0.9.
        let rho = spearman(&xs, &[10.0, 20.0, 20.0, 40.0]).unwrap();
        assert!((rho - 0.9f64.sqrt()).abs() < 1e-12, "{rho}");
        // Constant side → no association.
        assert_eq!(spearman(&xs, &[5.0, 5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!(spearman(&xs, &[1.0]).is_err());
    }

    #[test]
    fn labels_are_realized_discounted_costs_from_the_full_trajectory() {
        let gamma = 0.9;
        let costs = vec![1.0, 0.0, 2.0, 0.5];
        let labels = discounted_cost_to_go(&costs, gamma);
        for t in 0..costs.len() {
            let direct: f64 = costs[t..]
                .iter()
                .enumerate()
                .map(|(k, &c)| gamma.powi(k as i32) * c)
                .sum();
            assert!((labels[t] - direct).abs() < 1e-12, "step {t}");
        }
    }

    #[test]
    fn collection_pairs_errors_with_influence_scores() {
        let obs_dim = 3;
        let act_dim = 2;
        let spec = NetworkSpec::mlp(
            obs_dim + act_dim,
            &[6],
            1,
            Activation::Tanh,
            Activation::Identity,
        )
        .unwrap();
        let mut rng = substream(9, "calib-test");
        let safety = Network::init_uniform(spec, &mut rng).unwrap();

        let mut mk_log = |steps: usize| {
            let observations: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..obs_dim).map(|_| uniform_range(&mut rng, -1.0, 1.0)).collect())
                .collect();
            let actions: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..act_dim).map(|_| uniform_range(&mut rng, -1.0, 1.0)).collect())
                .collect();
            let costs: Vec<f64> =
                (0..steps).map(|_| uniform_range(&mut rng, 0.0, 1.0)).collect();
            RolloutLog { observations, actions, costs }
        };
        let logs = vec![mk_log(12), mk_log(7)];

        let d = collect_calibration(&safety, &logs, 0.95, 1e-6, InfluenceScope::FullParameters)
            .unwrap();
        assert_eq!(d.len(), 19);
        assert!(d.u.iter().all(|&v| v >= 0.0 && v.is_finite()));

        // Recompute one error label by hand: first step of the second log.
        let labels = discounted_cost_to_go(&logs[1].costs, 0.95);
        let mut input = logs[1].observations[0].clone();
        input.extend_from_slice(&logs[1].actions[0]);
        let mut ws = Workspace::for_spec(&safety.spec);
        forward_into(&safety.spec, &safety.params, &input, &mut ws).unwrap();
        let expected = (ws.output()[0] - labels[0]).abs();
        assert!((d.error[12] - expected).abs() < 1e-12);

        // Empty logs are rejected.
        let empty = RolloutLog { observations: vec![], actions: vec![], costs: vec![] };
        assert!(collect_calibration(&safety, &[empty], 0.95, 1e-6, InfluenceScope::FullParameters)
            .is_err());
    }
}
