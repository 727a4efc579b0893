//! Discrete noise schedules and their derived quantities.
//!
//! Timesteps are 1-based (`t = 1..=T`) to match the usual discrete
//! formulation; `alpha_bar(0)` is defined as 1, which makes the posterior
//! variance at `t = 1` exactly zero.

use crate::{Error, Result};
use std::fmt::Write as _;

/// Which variance is injected at each reverse step.
///
/// The admissible range is `posterior_var(t) <= v <= beta(t)`; the lower
/// bound corresponds to a delta-function data distribution, the upper bound
/// to isotropic Gaussian data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingVarChoice {
    #[default]
    LowerBound,
    UpperBound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
    pub sampling_var_choice: SamplingVarChoice,
}

impl NoiseSchedule {
    /// Build a schedule from explicit per-step betas.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidSchedule("need at least 2 steps".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule(
                "every beta must lie strictly in (0, 1)".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut posterior_vars = Vec::with_capacity(betas.len());
        for t in 1..=betas.len() {
            let ab_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
            posterior_vars.push((1.0 - ab_prev) / (1.0 - alpha_bars[t - 1]) * betas[t - 1]);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
            sampling_var_choice: SamplingVarChoice::LowerBound,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.len(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0)` is defined as 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// The variance actually injected at step `t`, per `sampling_var_choice`.
    pub fn sampling_var(&self, t: usize) -> f64 {
        match self.sampling_var_choice {
            SamplingVarChoice::LowerBound => self.posterior_vars[t - 1],
            SamplingVarChoice::UpperBound => self.betas[t - 1],
        }
    }

    pub fn with_sampling_var_choice(mut self, c: SamplingVarChoice) -> Self {
        self.sampling_var_choice = c;
        self
    }

    pub fn checked_beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta(t))
    }

    /// Serialize as CSV with columns `(t, beta, alpha_bar, posterior_var)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,posterior_var\n");
        for t in 1..=self.len() {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e}",
                t,
                self.beta(t),
                self.alpha_bar(t),
                self.posterior_var(t)
            );
        }
        out
    }
}

/// A fast-sampling sub-schedule of a parent schedule.
///
/// `effective` is itself a valid `NoiseSchedule` whose `alpha_bar` values are
/// exactly the parent's at the selected timesteps; its betas are recomputed
/// as `1 - alpha_bar(tau_i) / alpha_bar(tau_{i-1})`.
#[derive(Debug, Clone)]
pub struct RespacedSchedule {
    pub parent: NoiseSchedule,
    pub timesteps: Vec<usize>,
    pub effective: NoiseSchedule,
}

/// Linearly spaced betas from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::InvalidSchedule("T must be at least 2".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let step = (beta_end - beta_start) / (t_steps - 1) as f64;
    let betas = (0..t_steps)
        .map(|i| beta_start + step * i as f64)
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// The default schedule: endpoints 1e-4 and 0.02 at T = 1000, scaled by
/// `1000 / T` for other lengths.
pub fn default_linear_schedule(t_steps: usize) -> Result<NoiseSchedule> {
    let scale = 1000.0 / t_steps as f64;
    make_linear_schedule(t_steps, 1e-4 * scale, 0.02 * scale)
}

/// Select `t_prime` evenly spaced timesteps (always including `T`) and
/// rebuild the per-step betas so marginals are preserved exactly.
pub fn respace(parent: &NoiseSchedule, t_prime: usize) -> Result<RespacedSchedule> {
    let t_total = parent.len();
    if t_prime < 2 || t_prime > t_total {
        return Err(Error::InvalidArgument(format!(
            "T' must lie in 2..=T, got {t_prime} with T={t_total}"
        )));
    }
    let mut timesteps: Vec<usize> = (1..=t_prime)
        .map(|j| ((j * t_total) as f64 / t_prime as f64).round() as usize)
        .map(|t| t.clamp(1, t_total))
        .collect();
    timesteps.dedup();
    if *timesteps.last().unwrap() != t_total {
        timesteps.push(t_total);
    }
    let mut betas = Vec::with_capacity(timesteps.len());
    let mut prev_ab = 1.0;
    for &tau in &timesteps {
        let ab = parent.alpha_bar(tau);
        betas.push(1.0 - ab / prev_ab);
        prev_ab = ab;
    }
    let mut effective = NoiseSchedule::from_betas(betas)?;
    // keep alpha_bar exactly equal to the parent's selected values
    for (i, &tau) in timesteps.iter().enumerate() {
        effective.alpha_bars[i] = parent.alpha_bar(tau);
    }
    effective.sampling_var_choice = parent.sampling_var_choice;
    Ok(RespacedSchedule {
        parent: parent.clone(),
        timesteps,
        effective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_endpoints_and_first_alpha_bar() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert_relative_eq!(s.alpha_bar(1), 0.9999, max_relative = 1e-15);
    }

    #[test]
    fn two_step_hand_arithmetic() {
        let s = make_linear_schedule(2, 0.1, 0.3).unwrap();
        assert_relative_eq!(s.alpha_bar(2), 0.63, max_relative = 1e-15);
        let expected = (1.0 - 0.9) / (1.0 - 0.63) * 0.3;
        assert_relative_eq!(s.posterior_var(2), expected, max_relative = 1e-12);
        assert!((s.posterior_var(2) - 0.08108).abs() < 1e-4);
    }

    #[test]
    fn terminal_alpha_bar_matches_independent_product() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        // independent oracle: sum of logs instead of a running product
        let step = (0.02 - 1e-4) / 999.0;
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + step * i as f64)).ln())
            .sum();
        assert_relative_eq!(s.alpha_bar(1000), log_sum.exp(), max_relative = 1e-10);
        // regression pin from the product oracle
        assert_relative_eq!(s.alpha_bar(1000), 4.035829765e-5, max_relative = 1e-9);
    }

    #[test]
    fn posterior_var_at_one_is_zero() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn alpha_bar_ratio_equals_alpha() {
        let s = make_linear_schedule(100, 1e-3, 0.1).unwrap();
        for t in 1..=100 {
            assert_relative_eq!(
                s.alpha_bar(t) / s.alpha_bar(t - 1),
                s.alpha(t),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn posterior_below_sampling_below_beta() {
        let s = make_linear_schedule(50, 1e-3, 0.1).unwrap();
        for t in 1..=50 {
            assert!(s.posterior_var(t) <= s.beta(t));
            for c in [SamplingVarChoice::LowerBound, SamplingVarChoice::UpperBound] {
                let s2 = s.clone().with_sampling_var_choice(c);
                let v = s2.sampling_var(t);
                assert!(s.posterior_var(t) <= v && v <= s.beta(t));
            }
        }
    }

    #[test]
    fn respace_identity() {
        let s = make_linear_schedule(100, 1e-3, 0.1).unwrap();
        let r = respace(&s, 100).unwrap();
        assert_eq!(r.timesteps, (1..=100).collect::<Vec<_>>());
        for t in 1..=100 {
            assert_relative_eq!(r.effective.beta(t), s.beta(t), max_relative = 1e-12);
            assert_eq!(r.effective.alpha_bar(t), s.alpha_bar(t));
        }
    }

    #[test]
    fn respace_alpha_bars_are_exact_subsequence() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let r = respace(&s, 20).unwrap();
        assert_eq!(r.timesteps.len(), 20);
        assert_eq!(*r.timesteps.last().unwrap(), 1000);
        for (i, &tau) in r.timesteps.iter().enumerate() {
            assert_eq!(r.effective.alpha_bar(i + 1), s.alpha_bar(tau));
        }
    }

    #[test]
    fn respace_hand_arithmetic() {
        let s = NoiseSchedule::from_betas(vec![0.1; 4]).unwrap();
        let r = respace(&s, 2).unwrap();
        assert_eq!(r.timesteps, vec![2, 4]);
        // beta'_2 = 1 - abar_4/abar_2 = 1 - 0.81
        assert_relative_eq!(r.effective.beta(2), 0.19, max_relative = 1e-12);
    }

    #[test]
    fn respace_rejects_too_many_steps() {
        let s = make_linear_schedule(10, 0.01, 0.1).unwrap();
        assert!(respace(&s, 11).is_err());
    }

    #[test]
    fn respace_preserves_marginals() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let r = respace(&s, 20).unwrap();
        let (x0, eps) = (1.3_f64, -0.7_f64);
        for (i, &tau) in r.timesteps.iter().enumerate() {
            let ab_e = r.effective.alpha_bar(i + 1);
            let ab_p = s.alpha_bar(tau);
            let xe = ab_e.sqrt() * x0 + (1.0 - ab_e).sqrt() * eps;
            let xp = ab_p.sqrt() * x0 + (1.0 - ab_p).sqrt() * eps;
            assert_eq!(xe, xp);
        }
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(make_linear_schedule(10, 0.3, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.1).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(1, 0.1, 0.2).is_err());
    }

    #[test]
    fn csv_round_trip_shape() {
        let s = make_linear_schedule(5, 0.01, 0.1).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("t,beta,alpha_bar,posterior_var"));
    }
}
