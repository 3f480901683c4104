//! Log-ratio inference for survival ratios.
//!
//! Variances follow the Katz log method for a ratio of two proportions:
//! `var(ln(p/q)) = (1-p)/(p n_p) + (1-q)/(q n_q)`, each rate divided by its
//! own group size. Arms of an experiment are independent, so the variance of
//! the log ratio of two survival ratios is the sum of the arm variances, and
//! `z = ln(SR_t / SR_c) / sqrt(var)`.
//!
//! The normal CDF uses `statrs`' `erfc`, a Lanczos/rational implementation
//! accurate to near machine precision (well inside 1e-7).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::metrics::MetricTable;
use crate::model::GroupRole;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Katz,
    Bootstrap,
}

/// Point estimate of a survival ratio with its log-scale variance and interval.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatioEstimate {
    pub point: f64,
    pub focal_rate: f64,
    pub reference_rate: f64,
    pub log_variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Effective sample sizes behind each rate.
    pub n_focal: f64,
    pub n_reference: f64,
}

impl RatioEstimate {
    /// Ratio `p / q` with a Katz interval at `level`.
    pub fn katz(p: f64, n_p: f64, q: f64, n_q: f64, level: f64) -> Result<Self> {
        let v = log_sr_variance(p, n_p, q, n_q)?;
        let point = p / q;
        let (ci_low, ci_high) = sr_confidence_interval(point, v, level)?;
        Ok(Self {
            point,
            focal_rate: p,
            reference_rate: q,
            log_variance: v,
            ci_low,
            ci_high,
            n_focal: n_p,
            n_reference: n_q,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LiftResult {
    pub sr_treatment: f64,
    pub sr_control: f64,
    pub lift: f64,
    pub log_variance: f64,
    pub z: f64,
    pub p_value: f64,
}

impl LiftResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// `(1-p)/(p n_p) + (1-q)/(q n_q)`.
pub fn log_sr_variance(p: f64, n_p: f64, q: f64, n_q: f64) -> Result<f64> {
    for (rate, name) in [(p, "focal rate"), (q, "reference rate")] {
        if rate <= 0.0 || rate.is_nan() {
            return Err(Error::DegenerateRate { what: name.into() });
        }
        if rate > 1.0 {
            return Err(Error::InvalidArgument(format!("{name} {rate} exceeds 1")));
        }
    }
    if !(n_p > 0.0 && n_q > 0.0) {
        return Err(Error::InvalidArgument(
            "sample sizes must be positive".into(),
        ));
    }
    Ok(log_rate_variance(p, n_p) + log_rate_variance(q, n_q))
}

/// Delta-method variance of `ln(p_hat)` for a proportion over `n` units.
pub(crate) fn log_rate_variance(p: f64, n: f64) -> f64 {
    (1.0 - p) / (p * n)
}

/// Two-sided standard normal quantile for `level`, e.g. 1.95996 at 0.95.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// Log-symmetric interval `sr * exp(±z sqrt(v))`.
pub fn sr_confidence_interval(sr: f64, log_variance: f64, level: f64) -> Result<(f64, f64)> {
    if !(sr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ratio {sr} must be positive"
        )));
    }
    if !(log_variance >= 0.0) {
        return Err(Error::InvalidArgument(
            "variance must be non-negative".into(),
        ));
    }
    let half = normal_quantile(level)? * log_variance.sqrt();
    Ok((sr * (-half).exp(), sr * half.exp()))
}

pub fn lift_log_variance(var_t: f64, var_c: f64) -> f64 {
    var_t + var_c
}

pub fn z_score(sr_t: f64, sr_c: f64, log_variance: f64) -> Result<f64> {
    if !(sr_t > 0.0 && sr_c > 0.0) {
        return Err(Error::InvalidArgument("ratios must be positive".into()));
    }
    if sr_t == sr_c {
        return Ok(0.0);
    }
    if !(log_variance > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok((sr_t / sr_c).ln() / log_variance.sqrt())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided p-value `2 (1 - Phi(|z|))`.
pub fn p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|w| *w < 0.0 || w.is_nan()) {
        return Err(Error::InvalidArgument(
            "weights must be non-negative".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq == 0.0 {
        return Err(Error::InvalidArgument("all weights are zero".into()));
    }
    Ok(sum * sum / sum_sq)
}

fn lift_from(sr_t: f64, sr_c: f64, var_t: f64, var_c: f64) -> Result<LiftResult> {
    let log_variance = lift_log_variance(var_t, var_c);
    let z = z_score(sr_t, sr_c, log_variance)?;
    Ok(LiftResult {
        sr_treatment: sr_t,
        sr_control: sr_c,
        lift: sr_t / sr_c - 1.0,
        log_variance,
        z,
        p_value: p_value(z),
    })
}

/// Lift of a single conversion rate between arms, using `var(ln p) = (1-p)/(p n)`.
pub fn rate_lift(p_t: f64, n_t: f64, p_c: f64, n_c: f64) -> Result<LiftResult> {
    for (p, n) in [(p_t, n_t), (p_c, n_c)] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::DegenerateRate {
                what: "conversion rate".into(),
            });
        }
        if !(n > 0.0) {
            return Err(Error::InvalidArgument(
                "sample sizes must be positive".into(),
            ));
        }
    }
    lift_from(
        p_t,
        p_c,
        log_rate_variance(p_t, n_t),
        log_rate_variance(p_c, n_c),
    )
}

/// Survival-ratio estimate for transition `t`: the adjusted estimate when
/// present, otherwise a Katz estimate from the raw layer counts.
pub fn transition_estimate(table: &MetricTable, t: usize, level: f64) -> Result<RatioEstimate> {
    let tr = table
        .transitions
        .get(t)
        .ok_or_else(|| Error::InvalidArgument(format!("no transition {t}")))?;
    if let Some(adjusted) = &tr.adjusted {
        return Ok(adjusted.clone());
    }
    let from = &table.layers[tr.from];
    let (p, q) = table.conversion_rates(t);
    RatioEstimate::katz(
        p,
        from.focal_count as f64,
        q,
        from.reference_count as f64,
        level,
    )
}

/// Tests whether transition `t`'s survival ratio differs between arms.
pub fn compare_experiments(
    treatment: &MetricTable,
    control: &MetricTable,
    transition: usize,
) -> Result<LiftResult> {
    if !treatment.layer_names().eq(control.layer_names()) {
        return Err(Error::Mismatch("arms use different funnel layers".into()));
    }
    if treatment.focal_label != control.focal_label
        || treatment.reference_label != control.reference_label
    {
        return Err(Error::Mismatch("arms use different group labels".into()));
    }
    // Level only shapes the interval, which the lift does not use.
    let t = transition_estimate(treatment, transition, 0.95)?;
    let c = transition_estimate(control, transition, 0.95)?;
    lift_from(t.point, c.point, t.log_variance, c.log_variance)
}

/// Units of one group within one stratum, with their conversions and common weight.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCell {
    pub role: GroupRole,
    pub units: u64,
    pub converted: u64,
    pub unit_weight: f64,
}

/// Weighted focal/reference conversion-rate ratio over cells.
pub fn weighted_ratio(cells: &[WeightedCell]) -> Option<f64> {
    let rate = |role: GroupRole, conv: &dyn Fn(&WeightedCell) -> f64| {
        let (num, den) =
            cells
                .iter()
                .filter(|c| c.role == role && c.units > 0)
                .fold((0.0, 0.0), |(n, d), c| {
                    let w = c.unit_weight * c.units as f64;
                    (n + w * conv(c) / c.units as f64, d + w)
                });
        (den > 0.0).then(|| num / den)
    };
    let conv = |c: &WeightedCell| c.converted as f64;
    let p = rate(GroupRole::Focal, &conv)?;
    let q = rate(GroupRole::Reference, &conv)?;
    (q > 0.0).then(|| p / q)
}

/// Percentile bootstrap interval for the weighted ratio.
///
/// Units are resampled with replacement inside every cell, which keeps cell
/// sizes and therefore the matching weights fixed; the converted count of a
/// resampled cell is Binomial(units, converted/units).
pub fn bootstrap_interval(
    cells: &[WeightedCell],
    level: f64,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    normal_quantile(level)?;
    if resamples == 0 {
        return Err(Error::InvalidArgument("need at least one resample".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(resamples);
    let mut scratch = cells.to_vec();
    for _ in 0..resamples {
        for (cell, orig) in scratch.iter_mut().zip(cells) {
            cell.converted = if orig.units == 0 {
                0
            } else {
                let p = orig.converted as f64 / orig.units as f64;
                Binomial::new(orig.units, p)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?
                    .sample(&mut rng)
            };
        }
        draws.push(weighted_ratio(&scratch).unwrap_or(f64::INFINITY));
    }
    draws.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&draws, alpha), percentile(&draws, 1.0 - alpha)))
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn variance_examples() {
        assert_eq!(log_sr_variance(1.0, 10.0, 1.0, 10.0).unwrap(), 0.0);
        assert!((log_sr_variance(0.5, 100.0, 0.5, 100.0).unwrap() - 0.02).abs() < 1e-15);
        let v1 = log_sr_variance(0.3, 500.0, 0.6, 700.0).unwrap();
        let v2 = log_sr_variance(0.3, 1000.0, 0.6, 1400.0).unwrap();
        assert!((v1 / 2.0 - v2).abs() < 1e-15);
        assert!(matches!(
            log_sr_variance(0.0, 10.0, 0.5, 10.0),
            Err(Error::DegenerateRate { .. })
        ));
    }

    #[test]
    fn variance_matches_monte_carlo() {
        // p = q = 0.5, n = 100: empirical variance of ln(p_hat/q_hat) over 1e5 draws.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let bin = Binomial::new(100, 0.5).unwrap();
        let logs: Vec<f64> = (0..100_000)
            .map(|_| {
                let a = bin.sample(&mut rng) as f64;
                let b = bin.sample(&mut rng) as f64;
                (a / b).ln()
            })
            .collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64;
        assert!((var - 0.02).abs() / 0.02 < 0.10, "empirical {var}");
    }

    #[test]
    fn interval_examples() {
        assert_eq!(
            sr_confidence_interval(0.95, 0.0, 0.95).unwrap(),
            (0.95, 0.95)
        );
        let (lo, hi) = sr_confidence_interval(0.95, 0.001, 0.95).unwrap();
        assert!(lo < 0.95 && 0.95 < hi);
        assert!(((0.95f64 / lo).ln() - (hi / 0.95f64).ln()).abs() < 1e-12);
        assert!(sr_confidence_interval(0.0, 0.1, 0.95).is_err());
        assert!(sr_confidence_interval(1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn lift_variance_examples() {
        assert_eq!(lift_log_variance(0.0, 0.0), 0.0);
        assert!((lift_log_variance(0.02, 0.03) - 0.05).abs() < 1e-15);
        assert_eq!(lift_log_variance(0.02, 0.02), 2.0 * 0.02);
    }

    #[test]
    fn z_examples() {
        assert_eq!(z_score(0.9, 0.9, 0.0).unwrap(), 0.0);
        let z = z_score(0.02f64.exp(), 1.0, 0.0004).unwrap();
        assert!((z - 1.0).abs() < 1e-12);
        let back = z_score(1.0, 0.02f64.exp(), 0.0004).unwrap();
        assert!((z + back).abs() < 1e-12);
        assert!(matches!(
            z_score(0.9, 0.8, 0.0),
            Err(Error::DegenerateVariance)
        ));
    }

    #[test]
    fn p_value_examples() {
        assert_eq!(p_value(0.0), 1.0);
        assert!((p_value(1.96) - 0.05).abs() < 0.001);
        assert!((p_value(0.597) - 0.55).abs() < 0.005);
        // Standard table: 2(1 - Phi(1)) = 0.3173105.
        assert!((p_value(1.0) - 0.317_310_5).abs() < 1e-7);
        assert!((normal_quantile(0.95).unwrap() - 1.959_964).abs() < 1e-6);
    }

    #[test]
    fn effective_sample_size_examples() {
        assert!((effective_sample_size(&[0.7; 12]).unwrap() - 12.0).abs() < 1e-12);
        // One non-zero weight is one effective unit: (2+0)^2 / (4+0) = 1.
        assert_eq!(effective_sample_size(&[2.0, 0.0]).unwrap(), 1.0);
        assert!((effective_sample_size(&[1.0, 1.0, 2.0]).unwrap() - 16.0 / 6.0).abs() < 1e-12);
        assert!(effective_sample_size(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn small_adjusted_lift() {
        // Adjusted ratios 97.6% (control) and 97.5% (treatment) with a variance
        // giving |z| = 0.597 reproduce the displayed lift -0.1% and p 0.55.
        let log_gap = (0.975f64 / 0.976).ln();
        let var = (log_gap / 0.597).powi(2);
        let r = lift_from(0.975, 0.976, var / 2.0, var / 2.0).unwrap();
        assert!((r.lift * 100.0 - (-0.1)).abs() < 0.05);
        assert!((r.p_value - 0.55).abs() < 0.005);
        assert!(!r.significant(0.05));
    }

    #[test]
    fn bootstrap_is_seeded_and_brackets_the_point() {
        let cells = vec![
            WeightedCell {
                role: GroupRole::Focal,
                units: 4000,
                converted: 1200,
                unit_weight: 1.0,
            },
            WeightedCell {
                role: GroupRole::Reference,
                units: 5000,
                converted: 2000,
                unit_weight: 1.0,
            },
        ];
        let point = weighted_ratio(&cells).unwrap();
        let a = bootstrap_interval(&cells, 0.95, 500, 3).unwrap();
        let b = bootstrap_interval(&cells, 0.95, 500, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.0 < point && point < a.1);
    }

    proptest! {
        #[test]
        fn p_value_symmetric_and_monotone(a in 0.0f64..8.0, b in 0.0f64..8.0) {
            prop_assert_eq!(p_value(a), p_value(-a));
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(p_value(lo) >= p_value(hi));
            prop_assert!((0.0..=1.0).contains(&p_value(a)));
        }

        #[test]
        fn variance_non_negative_and_decreasing(
            p in 0.01f64..=1.0, q in 0.01f64..=1.0, n in 1.0f64..1e6, m in 1.0f64..1e6
        ) {
            let v = log_sr_variance(p, n, q, m).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(log_sr_variance(p, n * 2.0, q, m).unwrap() <= v);
            prop_assert!(log_sr_variance(p, n, q, m * 2.0).unwrap() <= v);
        }

        #[test]
        fn katz_interval_contains_point(p in 0.01f64..=1.0, q in 0.01f64..=1.0, n in 10.0f64..1e5) {
            let e = RatioEstimate::katz(p, n, q, n, 0.95).unwrap();
            prop_assert!(e.ci_low > 0.0);
            prop_assert!(e.ci_low <= e.point && e.point <= e.ci_high);
        }
    }
}
