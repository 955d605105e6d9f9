//! Monte-Carlo check of the conservative-gap tail bound.
//!
//! A synthetic two-valued critic takes value `U` on a risky action set and
//! `L` elsewhere. Sampling `m` candidate actions from a policy that hits
//! the risky set with mass `p_π`, versus uniformly with mass `p_unif`,
//! the best-of-`m` expectations obey the closed form
//!
//! `E[max] = L + (U − L)·(1 − (1 − p)^m)`,
//!
//! and the gap between the two samplers is bounded below by
//!
//! `(τ − L)·[(1 − p_π)^m − (1 − p_unif)^m]`  for any threshold τ ≤ U.
//!
//! The smooth-maximum variant replaces the max with a temperature-`c`
//! log-sum-exp, which sits within `c·log m` above the hard maximum, so its
//! gap respects the same bound slackened by `c·log m`.
//!
//! Both samplers share one uniform stream (common random numbers): each
//! slot's uniform is compared against both masses, so a policy hit is
//! always also a uniform hit and every per-draw gap is nonnegative.

use crate::error::{Error, Result};
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameters of the synthetic two-valued critic and the check itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConfig {
    /// Critic value off the risky set.
    pub lower: f64,
    /// Critic value on the risky set.
    pub upper: f64,
    /// Risk threshold; enters the bound through `τ − L`.
    pub tau: f64,
    /// Risky-set mass under the policy sampler.
    pub p_pi: f64,
    /// Risky-set mass under the uniform sampler.
    pub p_unif: f64,
    /// Number of candidate actions per draw.
    pub m: usize,
    /// Smooth-maximum temperature `c`.
    pub temperature: f64,
    /// Monte-Carlo draw count.
    pub draws: usize,
}

impl TheoremConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lower", self.lower),
            ("upper", self.upper),
            ("tau", self.tau),
            ("p_pi", self.p_pi),
            ("p_unif", self.p_unif),
            ("temperature", self.temperature),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be finite, got {v}")));
            }
        }
        // The threshold may sit at the upper value itself: that is the
        // tight configuration for the two-valued critic, where the bound
        // is attained with equality.
        if !(self.lower < self.tau && self.tau <= self.upper) {
            return Err(Error::InvalidInput(format!(
                "threshold must satisfy lower < tau <= upper, got {} / {} / {}",
                self.lower, self.tau, self.upper
            )));
        }
        if !(0.0 <= self.p_pi && self.p_pi <= self.p_unif && self.p_unif <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "sampler masses must satisfy 0 <= p_pi <= p_unif <= 1, got {} and {}",
                self.p_pi, self.p_unif
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("candidate count m must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.draws == 0 {
            return Err(Error::InvalidInput("draw count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything the check measures and concludes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremOutput {
    /// Mean per-draw `max` gap (uniform minus policy) and its standard error.
    pub gap_max: f64,
    pub se_max: f64,
    /// Mean per-draw smooth-maximum gap and its standard error.
    pub gap_lse: f64,
    pub se_lse: f64,
    /// `(τ − L)·[(1 − p_π)^m − (1 − p_unif)^m]`.
    pub bound: f64,
    /// The bound slackened for the smooth maximum: `bound − c·log m`.
    pub lse_bound: f64,
    /// Closed-form `E[max]` under each sampler.
    pub expected_max_pi: f64,
    pub expected_max_unif: f64,
    /// Empirical `E[max]` under each sampler.
    pub emp_max_pi: f64,
    pub emp_max_unif: f64,
    /// Gap conclusions, each with a 3-standard-error allowance.
    pub pass_max: bool,
    pub pass_lse: bool,
    /// Set when the draw count is below 10⁴ and the standard errors are too
    /// coarse to trust.
    pub low_precision: bool,
}

/// Closed-form best-of-`m` expectation of the two-valued critic:
/// `L + (U − L)·(1 − (1 − p)^m)`.
pub fn expected_max(lower: f64, upper: f64, p: f64, m: usize) -> f64 {
    lower + (upper - lower) * (1.0 - (1.0 - p).powi(m as i32))
}

/// Temperature-`c` log-sum-exp of `k` copies of `upper` and `m − k` copies
/// of `lower`, computed max-shifted.
fn two_level_lse(lower: f64, upper: f64, k: usize, m: usize, c: f64) -> f64 {
    if k == 0 {
        return lower + c * (m as f64).ln();
    }
    let rest = (m - k) as f64 * ((lower - upper) / c).exp();
    upper + c * (k as f64 + rest).ln()
}

/// Runs the Monte-Carlo check: estimates both best-of-`m` gaps under common
/// random numbers, compares them against the closed-form bound (with a
/// 3-standard-error allowance), and reports the closed forms alongside.
pub fn theorem1_check(cfg: &TheoremConfig, rng_stream: &mut ChaCha8Rng) -> Result<TheoremOutput> {
    cfg.validate()?;
    let (l, u, c, m) = (cfg.lower, cfg.upper, cfg.temperature, cfg.m);
    let draws = cfg.draws;

    let mut sum_max = 0.0;
    let mut sumsq_max = 0.0;
    let mut sum_lse = 0.0;
    let mut sumsq_lse = 0.0;
    let mut sum_pi = 0.0;
    let mut sum_unif = 0.0;

    for _ in 0..draws {
        let mut hits_pi = 0usize;
        let mut hits_unif = 0usize;
        for _ in 0..m {
            let v = rng::uniform01(rng_stream);
            if v < cfg.p_pi {
                hits_pi += 1;
            }
            if v < cfg.p_unif {
                hits_unif += 1;
            }
        }
        let max_pi = if hits_pi > 0 { u } else { l };
        let max_unif = if hits_unif > 0 { u } else { l };
        let lse_pi = two_level_lse(l, u, hits_pi, m, c);
        let lse_unif = two_level_lse(l, u, hits_unif, m, c);
        debug_assert!(lse_pi >= max_pi - 1e-12 && lse_pi <= max_pi + c * (m as f64).ln() + 1e-12);

        let d_max = max_unif - max_pi;
        let d_lse = lse_unif - lse_pi;
        sum_max += d_max;
        sumsq_max += d_max * d_max;
        sum_lse += d_lse;
        sumsq_lse += d_lse * d_lse;
        sum_pi += max_pi;
        sum_unif += max_unif;
    }

    let n = draws as f64;
    let gap_max = sum_max / n;
    let gap_lse = sum_lse / n;
    let se = |sumsq: f64, mean: f64| {
        let var = (sumsq / n - mean * mean).max(0.0);
        (var / n).sqrt()
    };
    let se_max = se(sumsq_max, gap_max);
    let se_lse = se(sumsq_lse, gap_lse);

    let survive_pi = (1.0 - cfg.p_pi).powi(m as i32);
    let survive_unif = (1.0 - cfg.p_unif).powi(m as i32);
    let bound = (cfg.tau - l) * (survive_pi - survive_unif);
    let lse_bound = bound - c * (m as f64).ln();

    Ok(TheoremOutput {
        gap_max,
        se_max,
        gap_lse,
        se_lse,
        bound,
        lse_bound,
        expected_max_pi: expected_max(l, u, cfg.p_pi, m),
        expected_max_unif: expected_max(l, u, cfg.p_unif, m),
        emp_max_pi: sum_pi / n,
        emp_max_unif: sum_unif / n,
        pass_max: gap_max >= bound - 3.0 * se_max,
        pass_lse: gap_lse >= lse_bound - 3.0 * se_lse,
        low_precision: draws < 10_000,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn base_config() -> TheoremConfig {
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

    #[test]
    fn invalid_configurations_are_rejected() {
        let ok = base_config();
        assert!(ok.validate().is_ok());
        for bad in [
            TheoremConfig { tau: 1.5, ..ok },
            TheoremConfig { tau: 0.0, ..ok },
            TheoremConfig { tau: -0.2, ..ok },
            TheoremConfig { p_pi: 0.7, ..ok }, // exceeds p_unif
            TheoremConfig { p_unif: 1.3, ..ok },
            TheoremConfig { p_pi: -0.1, ..ok },
            TheoremConfig { m: 0, ..ok },
            TheoremConfig { temperature: 0.0, ..ok },
            TheoremConfig { draws: 0, ..ok },
            TheoremConfig { lower: f64::NAN, ..ok },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn equal_samplers_give_zero_gap_zero_bound_and_pass() {
        let cfg = TheoremConfig { p_pi: 0.3, p_unif: 0.3, draws: 5_000, ..base_config() };
        let mut rng = substream(0, "theorem-mc");
        let out = theorem1_check(&cfg, &mut rng).unwrap();
        // Common random numbers make the per-draw gap identically zero.
        assert_eq!(out.gap_max, 0.0);
        assert_eq!(out.gap_lse, 0.0);
        assert_eq!(out.se_max, 0.0);
        assert_eq!(out.bound, 0.0);
        assert!(out.pass_max);
        assert!(out.pass_lse);
        assert!(out.low_precision);
    }

    #[test]
    fn degenerate_masses_attain_the_bound_exactly() {
        let cfg = TheoremConfig {
            p_pi: 0.0,
            p_unif: 1.0,
            m: 1,
            draws: 1_000,
            ..base_config()
        };
        let mut rng = substream(0, "theorem-mc");
        let out = theorem1_check(&cfg, &mut rng).unwrap();
        assert_eq!(out.gap_max, 1.0);
        assert_eq!(out.bound, 1.0);
        assert_eq!(out.se_max, 0.0);
        assert!(out.pass_max);
        // m = 1 makes the smooth maximum exact: same gap, bound unchanged.
        assert!((out.gap_lse - 1.0).abs() < 1e-12);
        assert_eq!(out.lse_bound, 1.0);
        assert!(out.pass_lse);
    }

    #[test]
    fn reference_configuration_matches_the_closed_form_within_three_sigma() {
        let cfg = base_config();
        let mut rng = substream(0, "theorem-mc");
        let out = theorem1_check(&cfg, &mut rng).unwrap();

        let closed = 0.9f64.powi(10) - 0.5f64.powi(10);
        assert!((out.bound - closed).abs() < 1e-15);
        assert!(
            (out.gap_max - closed).abs() <= 3.0 * out.se_max,
            "gap {} vs closed {closed} (se {})",
            out.gap_max,
            out.se_max
        );
        assert!(out.pass_max);
        assert!(out.pass_lse);
        assert!(!out.low_precision);

        // Per-sampler empirical means agree with their closed forms.
        for (emp, p) in [(out.emp_max_pi, 0.1_f64), (out.emp_max_unif, 0.5)] {
            let q = 1.0 - (1.0 - p).powi(10);
            let se = (q * (1.0 - q) / cfg.draws as f64).sqrt();
            let closed_mean = expected_max(0.0, 1.0, p, 10);
            assert!((emp - closed_mean).abs() <= 3.0 * se, "{emp} vs {closed_mean}");
        }
    }

    #[test]
    fn smooth_gap_stays_within_the_log_m_corridor_of_the_hard_gap() {
        let mut rng = substream(4, "theorem-mc");
        let mut pick = substream(5, "theorem-cfg");
        for _ in 0..30 {
            let p_pi = crate::rng::uniform_range(&mut pick, 0.0, 0.5);
            let p_unif = crate::rng::uniform_range(&mut pick, p_pi, 1.0);
            let m = 1 + (crate::rng::index(&mut pick, 12));
            let c = crate::rng::uniform_range(&mut pick, 0.2, 2.0);
            let lower = crate::rng::uniform_range(&mut pick, -2.0, 0.0);
            let upper = lower + crate::rng::uniform_range(&mut pick, 0.5, 3.0);
            let cfg = TheoremConfig {
                lower,
                upper,
                tau: upper,
                p_pi,
                p_unif,
                m,
                temperature: c,
                draws: 2_000,
            };
            let out = theorem1_check(&cfg, &mut rng).unwrap();
            let corridor = c * (m as f64).ln() + 1e-12;
            assert!(out.gap_max >= 0.0);
            assert!(out.gap_lse >= out.gap_max - corridor, "{out:?}");
            assert!(out.gap_lse <= out.gap_max + corridor, "{out:?}");
        }
    }

    #[test]
    fn closed_form_tracks_monte_carlo_across_a_parameter_grid() {
        let mut rng = substream(6, "theorem-mc");
        for (p, m) in [(0.05, 2), (0.3, 5), (0.7, 3), (0.95, 8)] {
            let cfg = TheoremConfig {
                p_pi: 0.0,
                p_unif: p,
                m,
                draws: 40_000,
                ..base_config()
            };
            let out = theorem1_check(&cfg, &mut rng).unwrap();
            let q = 1.0 - (1.0 - p).powi(m as i32);
            let se = (q * (1.0 - q) / 40_000.0).sqrt();
            assert!(
                (out.emp_max_unif - out.expected_max_unif).abs() <= 3.0 * se,
                "p={p} m={m}: {} vs {}",
                out.emp_max_unif,
                out.expected_max_unif
            );
        }
    }

    #[test]
    fn tiny_draw_counts_raise_the_precision_flag() {
        let cfg = TheoremConfig { draws: 100, ..base_config() };
        let mut rng = substream(0, "theorem-mc");
        let out = theorem1_check(&cfg, &mut rng).unwrap();
        assert!(out.low_precision);
        assert!(out.gap_max.is_finite() && out.se_max.is_finite());
    }
}
