//! Monte Carlo summaries: means with standard errors, moment estimates with
//! delta-method errors, bootstrap errors, and Clopper–Pearson limits.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::rng;

/// Two-sided level of reported confidence intervals.
pub const CI_LEVEL: f64 = 0.99;
/// One-sided level of reported upper confidence limits.
pub const UCL_LEVEL: f64 = 0.99;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub quantity: String,
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    /// One-sided upper confidence limit at [`UCL_LEVEL`].
    pub ucl: f64,
    pub trials: usize,
    pub seed: u64,
}

pub fn normal_quantile(prob: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(prob)
}

impl McEstimate {
    pub fn from_parts(quantity: &str, mean: f64, std_error: f64, trials: usize, seed: u64) -> Self {
        let z2 = normal_quantile(0.5 + CI_LEVEL / 2.0);
        let z1 = normal_quantile(UCL_LEVEL);
        Self {
            quantity: quantity.to_string(),
            mean,
            std_error,
            ci_low: mean - z2 * std_error,
            ci_high: mean + z2 * std_error,
            level: CI_LEVEL,
            ucl: mean + z1 * std_error,
            trials,
            seed,
        }
    }

    /// Sample mean and its standard error.
    pub fn of_mean(quantity: &str, values: &[f64], seed: u64) -> Self {
        let (mean, se) = mean_and_se(values);
        Self::from_parts(quantity, mean, se, values.len(), seed)
    }

    /// `(E x^q)^{1/q}` with a delta-method standard error.
    pub fn of_moment(quantity: &str, values: &[f64], q: f64, seed: u64) -> Self {
        let powered: Vec<f64> = values.iter().map(|x| x.abs().powf(q)).collect();
        let (mq, se_mq) = mean_and_se(&powered);
        let est = mq.powf(1.0 / q);
        let se = if mq > 0.0 { est / (q * mq) * se_mq } else { 0.0 };
        Self::from_parts(quantity, est, se, values.len(), seed)
    }
}

/// Sample mean and standard error of the mean (zero for fewer than two values).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Bootstrap standard error of `statistic` over `values`.
pub fn bootstrap_se(values: &[f64], seed: u64, statistic: impl Fn(&[f64]) -> f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut buf = vec![0.0; n];
    let reps: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            for slot in buf.iter_mut() {
                *slot = values[r.random_range(0..n)];
            }
            statistic(&buf)
        })
        .collect();
    let (_, se_of_mean) = mean_and_se(&reps);
    se_of_mean * (reps.len() as f64).sqrt()
}

/// Tail probability estimate with Clopper–Pearson limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub threshold: f64,
    pub hits: usize,
    pub trials: usize,
    pub frequency: f64,
    /// Two-sided Clopper–Pearson interval at [`CI_LEVEL`].
    pub ci_low: f64,
    pub ci_high: f64,
    /// One-sided Clopper–Pearson upper limit at [`UCL_LEVEL`].
    pub ucl: f64,
    /// One-sided Clopper–Pearson lower limit at [`UCL_LEVEL`].
    pub lcl: f64,
}

impl TailEstimate {
    pub fn new(threshold: f64, hits: usize, trials: usize) -> Self {
        let a2 = (1.0 - CI_LEVEL) / 2.0;
        let a1 = 1.0 - UCL_LEVEL;
        Self {
            threshold,
            hits,
            trials,
            frequency: if trials == 0 { f64::NAN } else { hits as f64 / trials as f64 },
            ci_low: cp_lower(hits, trials, a2),
            ci_high: cp_upper(hits, trials, a2),
            ucl: cp_upper(hits, trials, a1),
            lcl: cp_lower(hits, trials, a1),
        }
    }
}

/// Clopper–Pearson upper limit with tail mass `alpha`.
pub fn cp_upper(hits: usize, trials: usize, alpha: f64) -> f64 {
    if trials == 0 || hits >= trials {
        return 1.0;
    }
    Beta::new(hits as f64 + 1.0, (trials - hits) as f64).expect("positive shape parameters").inverse_cdf(1.0 - alpha)
}

/// Clopper–Pearson lower limit with tail mass `alpha`.
pub fn cp_lower(hits: usize, trials: usize, alpha: f64) -> f64 {
    if hits == 0 || trials == 0 {
        return 0.0;
    }
    Beta::new(hits as f64, (trials - hits) as f64 + 1.0).expect("positive shape parameters").inverse_cdf(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn mean_and_se_basic() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(m, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert_relative_eq!(se, (5.0f64 / 12.0).sqrt(), max_relative = 1e-14);
        let (m, se) = mean_and_se(&[0.5; 10]);
        assert_eq!((m, se), (0.5, 0.0));
    }

    #[test]
    fn zero_hit_upper_limit_matches_closed_form() {
        // With zero hits the upper limit solves (1-u)^n = alpha.
        let n = 10_000;
        let u = cp_upper(0, n, 0.01);
        assert_relative_eq!(u, 1.0 - 0.01f64.powf(1.0 / n as f64), max_relative = 1e-8);
        assert_eq!(cp_lower(0, n, 0.01), 0.0);
        assert_eq!(cp_upper(n, n, 0.01), 1.0);
        // all-hit lower limit solves l^n = alpha
        assert_relative_eq!(cp_lower(50, 50, 0.01), 0.01f64.powf(1.0 / 50.0), max_relative = 1e-8);
    }

    #[test]
    fn tail_estimate_brackets_frequency() {
        let t = TailEstimate::new(1.0, 37, 1000);
        assert!(t.ci_low <= t.frequency && t.frequency <= t.ci_high);
        assert!(t.lcl <= t.frequency && t.frequency <= t.ucl);
        assert!(t.ucl < t.ci_high);
    }

    #[test]
    fn moment_estimate_of_constant_has_zero_error() {
        let e = McEstimate::of_moment("x", &[2.0; 50], 3.0, 1);
        assert_relative_eq!(e.mean, 2.0, max_relative = 1e-14);
        assert_eq!(e.std_error, 0.0);
        assert!(e.ci_low <= e.mean && e.mean <= e.ci_high);
    }

    #[test]
    fn bootstrap_se_tracks_analytic_se() {
        let values: Vec<f64> = (0..400).map(|i| (i % 7) as f64).collect();
        let (_, se) = mean_and_se(&values);
        let boot = bootstrap_se(&values, 5, |xs| xs.iter().sum::<f64>() / xs.len() as f64);
        assert!((boot / se - 1.0).abs() < 0.15, "boot {boot} vs {se}");
        assert_eq!(bootstrap_se(&[3.0; 20], 5, |xs| xs[0]), 0.0);
    }
}
