use rand::Rng;
use serde::Serialize;

use crate::rng;

/// Sample mean with a percentile-bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn excludes_zero(&self) -> bool {
        self.lo > 0.0 || self.hi < 0.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// 95% percentile-bootstrap interval for the mean. Returns NaNs for an
/// empty sample.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64) -> Interval {
    if values.is_empty() {
        return Interval { mean: f64::NAN, lo: f64::NAN, hi: f64::NAN };
    }
    let n = values.len();
    let mut r = rng::stream(seed);
    let mut means: Vec<f64> =
        (0..resamples.max(1)).map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let b = means.len();
    let lo = ((b as f64) * 0.025).floor() as usize;
    let hi = (((b as f64) * 0.975).ceil() as usize).clamp(1, b) - 1;
    Interval { mean: mean(values), lo: means[lo.min(b - 1)], hi: means[hi] }
}

/// Bootstrap interval for the mean of paired differences `a_i − b_i`.
pub fn bootstrap_paired_diff(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Interval {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    bootstrap_mean(&d, resamples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sample_has_degenerate_interval() {
        let i = bootstrap_mean(&[3.0; 10], 500, 1);
        assert_eq!((i.mean, i.lo, i.hi), (3.0, 3.0, 3.0));
        assert!(i.excludes_zero());
    }

    #[test]
    fn interval_brackets_the_mean_and_is_seeded() {
        let v: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = bootstrap_mean(&v, 2000, 9);
        assert!(a.lo <= a.mean && a.mean <= a.hi);
        assert_eq!(a, bootstrap_mean(&v, 2000, 9));
        // roughly ±1.96·sd/√n
        let sd = (v.iter().map(|x| (x - a.mean).powi(2)).sum::<f64>() / 39.0).sqrt();
        let half = 1.96 * sd / 40f64.sqrt();
        assert!(((a.hi - a.lo) / 2.0 - half).abs() < 0.3 * half);
    }

    #[test]
    fn paired_difference() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.5, 1.5, 2.5];
        let d = bootstrap_paired_diff(&a, &b, 100, 0);
        assert!((d.mean - 0.5).abs() < 1e-15 && d.lo == 0.5 && d.hi == 0.5);
        assert!(bootstrap_mean(&[], 10, 0).mean.is_nan());
    }
}
