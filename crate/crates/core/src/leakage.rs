//! Mutual-information leakage bound for masked shares, and its inversion.
//!
//! What a single worker can learn about one client's gradient from the
//! masked share is bounded by the parallel Gaussian channel capacity:
//! sum over coordinates of (1/2) ln(1 + Var_k / sigma^2), in nats. The
//! bound assumes Gaussian masks; fixed-norm codebook rows are only
//! asymptotically Gaussian, which the report flags as a caveat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradientVector;

/// Floor returned by [`calibrate_sigma`] when every variance is zero.
pub const SIGMA_MIN: f64 = 1e-6;

/// Text of the Gaussian-approximation caveat carried by every report.
pub const GAUSSIAN_CAVEAT: &str =
    "bound assumes Gaussian masks; fixed-norm codebook rows are asymptotically Gaussian in dim";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    Declared,
    Estimated,
}

/// Per-client leakage bound and its per-coordinate breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Sum of the per-coordinate terms, in nats.
    pub per_client_bound_nats: f64,
    /// The same bound converted to bits for display.
    pub per_client_bound_bits: f64,
    /// (1/2) ln(1 + Var_k / sigma^2) per coordinate.
    pub per_coordinate_terms: Vec<f64>,
    pub sigma: f64,
    pub variance_source: VarianceSource,
    pub gaussian_approximation: bool,
    pub caveat: String,
}

impl LeakageReport {
    pub fn with_variance_source(mut self, source: VarianceSource) -> Self {
        self.variance_source = source;
        self
    }
}

/// Upper bound, in nats, on what one worker learns about one gradient.
pub fn mi_bound(variances: &[f64], sigma: f64) -> Result<LeakageReport> {
    crate::model::require_positive("sigma", sigma)?;
    for (index, &v) in variances.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("variance (index {index})"),
            });
        }
        if v < 0.0 {
            return Err(Error::NegativeVariance { index, value: v });
        }
    }
    let s2 = sigma * sigma;
    let terms: Vec<f64> = variances
        .iter()
        .map(|v| 0.5 * (1.0 + v / s2).ln())
        .collect();
    let nats: f64 = terms.iter().sum();
    Ok(LeakageReport {
        per_client_bound_nats: nats,
        per_client_bound_bits: nats / std::f64::consts::LN_2,
        per_coordinate_terms: terms,
        sigma,
        variance_source: VarianceSource::Declared,
        gaussian_approximation: true,
        caveat: GAUSSIAN_CAVEAT.to_string(),
    })
}

/// Unbiased per-coordinate sample variance (divisor m-1) over a gradient set.
pub fn estimate_variances(samples: &[GradientVector]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let dim = samples[0].dim();
    for s in samples {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.dim(),
            });
        }
    }
    let m = samples.len() as f64;
    let mut means = vec![0.0; dim];
    for s in samples {
        for (acc, v) in means.iter_mut().zip(&s.values) {
            *acc += v;
        }
    }
    for acc in means.iter_mut() {
        *acc /= m;
    }
    let mut vars = vec![0.0; dim];
    for s in samples {
        for k in 0..dim {
            let d = s.values[k] - means[k];
            vars[k] += d * d;
        }
    }
    for v in vars.iter_mut() {
        *v /= m - 1.0;
    }
    Ok(vars)
}

/// Result of [`calibrate_sigma`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibratedSigma {
    pub sigma: f64,
    /// Set when every variance was zero: any sigma satisfies the budget, so
    /// the configured minimum is returned.
    pub all_variances_zero: bool,
}

/// Smallest sigma keeping the bound at or under `budget_nats`.
///
/// Bisection to 1e-9 relative width. With uniform variances V the answer
/// closes to sigma^2 = V / (e^(2 eps / d) - 1), which seeds the bracket.
pub fn calibrate_sigma(variances: &[f64], budget_nats: f64) -> Result<CalibratedSigma> {
    crate::model::require_positive("leakage budget", budget_nats)?;
    for (index, &v) in variances.iter().enumerate() {
        if v < 0.0 {
            return Err(Error::NegativeVariance { index, value: v });
        }
    }
    let positives: Vec<f64> = variances.iter().copied().filter(|&v| v > 0.0).collect();
    if positives.is_empty() {
        return Ok(CalibratedSigma {
            sigma: SIGMA_MIN,
            all_variances_zero: true,
        });
    }

    let bound_at = |sigma: f64| -> f64 {
        let s2 = sigma * sigma;
        variances.iter().map(|v| 0.5 * (1.0 + v / s2).ln()).sum()
    };
    let uniform_sigma =
        |v: f64, d: usize| -> f64 { (v / ((2.0 * budget_nats / d as f64).exp() - 1.0)).sqrt() };

    let v_max = positives.iter().cloned().fold(0.0, f64::max);
    let v_min = positives.iter().cloned().fold(f64::INFINITY, f64::min);
    // Treating every coordinate as v_max overstates the bound, so its
    // closed form is an upper bracket; v_min over only the positive
    // coordinates understates it, giving a lower bracket.
    let mut hi = uniform_sigma(v_max, variances.len());
    let mut lo = uniform_sigma(v_min, positives.len());
    debug_assert!(bound_at(hi) <= budget_nats * (1.0 + 1e-12));
    while bound_at(lo) <= budget_nats && lo > f64::MIN_POSITIVE {
        lo /= 2.0;
    }
    while (hi - lo) / hi > 1e-9 {
        let mid = 0.5 * (hi + lo);
        if bound_at(mid) <= budget_nats {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CalibratedSigma {
        sigma: hi,
        all_variances_zero: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::Normal;

    #[test]
    fn zero_variances_leak_nothing() {
        let report = mi_bound(&[0.0; 8], 0.5).unwrap();
        assert_eq!(report.per_client_bound_nats, 0.0);
        assert!(report.per_coordinate_terms.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn matched_variance_gives_half_ln_two_per_coordinate() {
        let sigma = 0.7;
        let report = mi_bound(&[sigma * sigma; 10], sigma).unwrap();
        let expect = 5.0 * std::f64::consts::LN_2;
        assert!((report.per_client_bound_nats - expect).abs() <= 1e-12);
        assert!((report.per_client_bound_bits - 5.0).abs() <= 1e-12);
    }

    #[test]
    fn bound_equals_sum_of_terms() {
        let report = mi_bound(&[0.1, 0.5, 2.0, 0.0], 0.9).unwrap();
        let sum: f64 = report.per_coordinate_terms.iter().sum();
        assert!((report.per_client_bound_nats - sum).abs() <= 1e-12);
        assert!(report.per_coordinate_terms.iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn rejects_negative_variance_and_bad_sigma() {
        assert!(matches!(
            mi_bound(&[-0.1], 1.0),
            Err(Error::NegativeVariance { .. })
        ));
        assert!(matches!(
            mi_bound(&[1.0], 0.0),
            Err(Error::NonPositive { .. })
        ));
    }

    #[test]
    fn estimated_bound_tracks_closed_form() {
        // Known per-coordinate variances; estimate from 10_000 samples and
        // compare the resulting bound against the analytic one.
        let truth: [f64; 3] = [1.0, 0.25, 4.0];
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        let dists: Vec<Normal<f64>> = truth
            .iter()
            .map(|&v| Normal::new(0.0, v.sqrt()).unwrap())
            .collect();
        let samples: Vec<GradientVector> = (0..10_000)
            .map(|i| {
                GradientVector::new(i as u32, dists.iter().map(|d| rng.sample(d)).collect())
                    .unwrap()
            })
            .collect();
        let est = estimate_variances(&samples).unwrap();
        let got = mi_bound(&est, 1.0).unwrap().per_client_bound_nats;
        let want = mi_bound(&truth, 1.0).unwrap().per_client_bound_nats;
        assert!((got - want).abs() <= 0.02 * want, "{got} vs {want}");
    }

    #[test]
    fn variance_estimator_examples() {
        let a = GradientVector::new(1, vec![0.0]).unwrap();
        let b = GradientVector::new(2, vec![2.0]).unwrap();
        assert_eq!(estimate_variances(&[a, b]).unwrap(), vec![2.0]);

        let same: Vec<GradientVector> = (0..5)
            .map(|i| GradientVector::new(i, vec![3.0, -1.0]).unwrap())
            .collect();
        assert_eq!(estimate_variances(&same).unwrap(), vec![0.0, 0.0]);

        let single = vec![GradientVector::new(1, vec![1.0]).unwrap()];
        assert!(matches!(
            estimate_variances(&single),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn variance_estimator_tracks_known_distribution() {
        let truth: [f64; 4] = [0.5, 2.0, 8.0, 0.01];
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let dists: Vec<Normal<f64>> = truth
            .iter()
            .map(|&v| Normal::new(1.0, v.sqrt()).unwrap())
            .collect();
        let samples: Vec<GradientVector> = (0..10_000)
            .map(|i| GradientVector::new(i, dists.iter().map(|d| rng.sample(d)).collect()).unwrap())
            .collect();
        let est = estimate_variances(&samples).unwrap();
        for (e, t) in est.iter().zip(&truth) {
            assert!((e - t).abs() <= 0.05 * t, "{e} vs {t}");
        }
    }

    #[test]
    fn calibrate_closed_form_cases() {
        // d=1, V=1, eps = (1/2) ln 2 -> sigma = 1.
        let eps = 0.5 * std::f64::consts::LN_2;
        let got = calibrate_sigma(&[1.0], eps).unwrap();
        assert!(!got.all_variances_zero);
        assert!((got.sigma - 1.0).abs() <= 1e-8);

        // d=1, V=1, eps = (1/2) ln(1 + 1/4) -> sigma = 2.
        let eps = 0.5 * (1.25f64).ln();
        let got = calibrate_sigma(&[1.0], eps).unwrap();
        assert!((got.sigma - 2.0).abs() <= 1e-8);
    }

    #[test]
    fn calibrate_brackets_the_budget() {
        let mut rng = ChaCha12Rng::seed_from_u64(500);
        for _ in 0..25 {
            let d = rng.gen_range(1..12);
            let vars: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..10.0)).collect();
            let eps = rng.gen_range(0.001..2.0);
            let cal = calibrate_sigma(&vars, eps).unwrap();
            let at = mi_bound(&vars, cal.sigma).unwrap().per_client_bound_nats;
            let below = mi_bound(&vars, cal.sigma * (1.0 - 1e-6))
                .unwrap()
                .per_client_bound_nats;
            assert!(at <= eps, "bound {at} exceeds budget {eps}");
            assert!(below > eps, "sigma not minimal: {below} <= {eps}");
            assert!((at - eps).abs() <= 1e-6 * eps);
        }
    }

    #[test]
    fn calibrate_all_zero_variances_flags_floor() {
        let cal = calibrate_sigma(&[0.0, 0.0], 0.5).unwrap();
        assert!(cal.all_variances_zero);
        assert_eq!(cal.sigma, SIGMA_MIN);
    }

    #[test]
    fn bound_strictly_decreases_in_sigma() {
        let vars = [0.3, 1.7, 0.0, 5.0];
        let mut prev = f64::INFINITY;
        for step in 1..=100 {
            let sigma = 0.05 * step as f64;
            let b = mi_bound(&vars, sigma).unwrap().per_client_bound_nats;
            assert!(b < prev);
            prev = b;
        }
    }

    #[test]
    fn bound_is_additive_over_coordinate_partitions() {
        let vars = [0.2, 0.9, 3.0, 0.0, 1.1];
        let sigma = 0.6;
        let whole = mi_bound(&vars, sigma).unwrap().per_client_bound_nats;
        let left = mi_bound(&vars[..2], sigma).unwrap().per_client_bound_nats;
        let right = mi_bound(&vars[2..], sigma).unwrap().per_client_bound_nats;
        assert!((whole - (left + right)).abs() <= 1e-12 * whole.max(1.0));
    }

    #[test]
    fn codebook_sigma_feeds_the_bound() {
        let cb = crate::codebook::build_codebook(4, 64, 8.0, 1).unwrap();
        let sigma = crate::codebook::equivalent_sigma(&cb);
        let report = mi_bound(&[0.01; 64], sigma).unwrap();
        assert!(report.per_client_bound_nats > 0.0);
        assert_eq!(report.sigma, sigma);
        assert!(report.gaussian_approximation);
    }
}
