//! Discrete noise schedule: per-step variances β_t and their cumulative
//! signal fractions ᾱ_t = ∏_{s≤t} (1 − β_s), with ᾱ_0 = 1.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parameters of a linear β schedule, as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly interpolated betas from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Build from an explicit β_1..β_T sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta_{} = {b} outside (0, 1)", i + 1)));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// ᾱ_t for t in [0, T].
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::IndexOutOfRange { index: t, lo: 0, hi: self.steps() })
    }

    /// β_t for t in [1, T].
    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::IndexOutOfRange { index: t, lo: 1, hi: self.steps() });
        }
        Ok(self.betas[t - 1])
    }

    /// Checks that `t` is a valid denoising step index, i.e. in [1, T].
    pub fn check_step(&self, t: usize) -> Result<()> {
        self.beta(t).map(|_| ())
    }

    /// Stable hex digest of the ᾱ sequence, used to tie saved weights to a schedule.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alpha_bars {
            h.update(a.to_bits().to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn four_step_hand_product() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let want_b = [0.1, 0.2, 0.3, 0.4];
        for (b, w) in s.betas().iter().zip(want_b) {
            assert!(close(*b, w, 1e-12), "{b} vs {w}");
        }
        let want = [1.0, 0.9, 0.72, 0.504, 0.3024];
        for (t, w) in want.iter().enumerate() {
            assert!(close(s.alpha_bar(t).unwrap(), *w, 1e-12));
        }
        assert!(close(s.alpha_bar(2).unwrap(), 0.72, 1e-12));
        assert!(close(s.alpha_bar(4).unwrap(), 0.3024, 1e-12));
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn fifty_steps_match_scripted_product() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        // independent evaluation: product of (1 - beta) with betas from the closed form
        let mut prod = 1.0f64;
        for i in 0..50 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 49.0;
            prod *= 1.0 - beta;
        }
        assert!(close(s.alpha_bar(50).unwrap(), prod, 1e-12));
        // log-sum route as a second check
        let log_sum: f64 = (0..50).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 49.0)).ln()).sum();
        assert!(close(s.alpha_bar(50).unwrap(), log_sum.exp(), 1e-12));
    }

    #[test]
    fn alpha_bar_zero_is_one() {
        for (t, b0, b1) in [(3, 0.01, 0.2), (17, 1e-4, 0.02)] {
            let s = NoiseSchedule::linear(t, b0, b1).unwrap();
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(NoiseSchedule::linear(0, 0.1, 0.2), Err(Error::InvalidRange(_))));
        assert!(NoiseSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(4, f64::NAN, 0.2).is_err());
    }

    #[test]
    fn index_out_of_range() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        assert!(matches!(s.alpha_bar(5), Err(Error::IndexOutOfRange { index: 5, .. })));
        assert!(s.check_step(0).is_err());
        assert!(s.check_step(4).is_ok());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn invariants_hold(steps in 1usize..400, b0 in 1e-5f64..0.05, extra in 0.0f64..0.2) {
                let b1 = (b0 + extra).min(0.5);
                let s = NoiseSchedule::linear(steps, b0, b1).unwrap();
                prop_assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
                prop_assert!(s.alpha_bar(steps).unwrap() > 0.0);
                for t in 1..=steps {
                    let (a, p) = (s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap());
                    prop_assert!(a < p);
                    let ratio = a / p;
                    let want = 1.0 - s.beta(t).unwrap();
                    prop_assert!((ratio - want).abs() <= 1e-12 * want);
                }
                let again = NoiseSchedule::linear(steps, b0, b1).unwrap();
                prop_assert_eq!(s, again);
            }
        }
    }
}
