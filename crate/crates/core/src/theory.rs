//! Closed-form variance oracles for the reverse samplers.
//!
//! Three published single/two-step formulas plus an exact linear-Gaussian
//! chain propagator. Every reverse step on Gaussian data with a Gaussian
//! error model is affine in `(x_t, x0_hat)` plus independent noise, so the
//! second moments of an entire chain are computable exactly; the Monte
//! Carlo measurements in `diagnostics` are checked against these numbers.

use crate::denoiser::ErrorProfile;
use crate::scaling::ScalingSchedule;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Single-point prediction for a sampling-distribution variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariancePrediction {
    /// Timestep the variance is reported at (after the step(s)).
    pub t: usize,
    /// Forward-process variance `1 - abar_t` at the same level.
    pub train_var: f64,
    pub sampled_var: f64,
    pub extra_term: f64,
}

impl VariancePrediction {
    fn new(t: usize, train_var: f64, sampled_var: f64) -> Self {
        Self {
            t,
            train_var,
            sampled_var,
            extra_term: sampled_var - train_var,
        }
    }
}

fn check_step_from(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t >= schedule.len() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.len() - 1,
        });
    }
    Ok(())
}

/// Variance of `x_t` after one DDPM step from the true `x_{t+1}` with
/// prediction-error scale `e_next` at `t + 1` (unit-variance data).
pub fn ddpm_single_step_var(
    schedule: &NoiseSchedule,
    t: usize,
    e_next: f64,
) -> Result<VariancePrediction> {
    check_step_from(schedule, t)?;
    let ab_t = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(t + 1);
    let beta_next = schedule.beta(t + 1);
    let extra = (ab_t.sqrt() * beta_next / (1.0 - ab_next) * e_next).powi(2);
    Ok(VariancePrediction::new(t, 1.0 - ab_t, 1.0 - ab_t + extra))
}

/// Variance of `x_t` after one deterministic DDIM step from the true
/// `x_{t+1}`.
pub fn ddim_single_step_var(
    schedule: &NoiseSchedule,
    t: usize,
    e_next: f64,
) -> Result<VariancePrediction> {
    check_step_from(schedule, t)?;
    let ab_t = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(t + 1);
    let a_next = schedule.alpha(t + 1);
    let coeff = 1.0 - ((a_next - ab_next) / (1.0 - ab_next)).sqrt();
    let extra = coeff * coeff * ab_t * e_next * e_next;
    Ok(VariancePrediction::new(t, 1.0 - ab_t, 1.0 - ab_t + extra))
}

/// Variance of `x_{t-1}` after two DDPM steps from the true `x_{t+1}`
/// (second-order Taylor form; slightly below the exact recursion).
pub fn ddpm_two_step_var(
    schedule: &NoiseSchedule,
    t: usize,
    e: f64,
) -> Result<VariancePrediction> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "two-step prediction needs t >= 2, got {t}"
        )));
    }
    check_step_from(schedule, t)?;
    let ab_prev = schedule.alpha_bar(t - 1);
    let ab_t = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(t + 1);
    let first = (ab_prev.sqrt() * schedule.beta(t) / (1.0 - ab_t) * e).powi(2);
    let f = (ab_t.sqrt() * schedule.beta(t + 1) / (1.0 - ab_next) * e).powi(2);
    let second =
        schedule.alpha(t) * (1.0 - ab_prev).powi(2) / (4.0 * (1.0 - ab_t).powi(3)) * f * f;
    Ok(VariancePrediction::new(
        t - 1,
        1.0 - ab_prev,
        1.0 - ab_prev + first + second,
    ))
}

/// Which reverse update the chain oracle propagates through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    Ddpm,
    Ddim { eta: f64 },
}

/// Affine step coefficients: `x_next = p x + q x0_hat + sqrt(noise_var) z`,
/// with the predicted epsilon already divided by `lambda`.
pub fn step_coeffs(
    schedule: &NoiseSchedule,
    kind: StepKind,
    t: usize,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    if t == 0 || t > schedule.len() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.len(),
        });
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    Ok(match kind {
        StepKind::Ddpm => {
            let a = schedule.alpha(t);
            let beta = schedule.beta(t);
            let p = (1.0 / a.sqrt()) * (1.0 - beta / ((1.0 - ab_t) * lambda));
            let q = ab_prev.sqrt() * beta / ((1.0 - ab_t) * lambda);
            let nv = if t == 1 { 0.0 } else { schedule.sampling_var(t) };
            (p, q, nv)
        }
        StepKind::Ddim { eta } => {
            let sigma2 = eta * eta * schedule.posterior_var(t);
            let rem = 1.0 - ab_prev - sigma2;
            if rem < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "DDIM noise exceeds 1 - abar at t = {t}"
                )));
            }
            let c = rem.sqrt();
            let s1 = (1.0 - ab_t).sqrt();
            // residual direction coefficient after rescaling eps by 1/lambda
            let d = (c - ab_prev.sqrt() * s1 / ab_t.sqrt()) / lambda;
            let p = ab_prev.sqrt() / ab_t.sqrt() + d / s1;
            let q = -d * ab_t.sqrt() / s1;
            (p, q, sigma2)
        }
    })
}

/// How the chain oracle models the predictor.
#[derive(Debug, Clone, Copy)]
pub enum ChainModel {
    /// `x0_hat = x_0 + e_t zeta` (anchored oracle).
    NoisyOracle { profile: ErrorProfile },
    /// `x0_hat = posterior mean + e_t zeta` for centered 1D Gaussian data.
    Analytic { perturbation: ErrorProfile },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainVarPoint {
    pub t: usize,
    /// Marginal variance of the chain state at `t`.
    pub marginal_var: f64,
    /// Variance of the anchored residual `x_hat_t - sqrt(abar_t) x_0`.
    pub residual_var: f64,
    pub train_var: f64,
}

/// Exact second-moment propagation of an anchored reverse chain on
/// centered 1D Gaussian data of variance `data_var`.
///
/// The chain starts from the true `x` at `start_level` (built from `x_0`
/// via the forward process) and steps down to 0. Timesteps are indices of
/// `schedule` itself, so pass the effective schedule when respacing.
pub fn gaussian_chain_var(
    schedule: &NoiseSchedule,
    data_var: f64,
    model: ChainModel,
    kind: StepKind,
    scaling: Option<&ScalingSchedule>,
    start_level: usize,
) -> Result<Vec<ChainVarPoint>> {
    if start_level == 0 || start_level > schedule.len() {
        return Err(Error::TimestepOutOfRange {
            t: start_level,
            max: schedule.len(),
        });
    }
    let s2 = data_var;
    // train_var is 1 - abar regardless of data_var (unit-noise forward process)
    let point = |t: usize, v: f64, c: f64| {
        let ab = schedule.alpha_bar(t);
        ChainVarPoint {
            t,
            marginal_var: v,
            residual_var: v - 2.0 * ab.sqrt() * c + ab * s2,
            train_var: 1.0 - ab,
        }
    };
    let ab0 = schedule.alpha_bar(start_level);
    // anchored start: Var(x) and Cov(x, x0)
    let mut v = ab0 * s2 + (1.0 - ab0);
    let mut c = ab0.sqrt() * s2;
    let mut out = vec![point(start_level, v, c)];
    for t in (1..=start_level).rev() {
        let lambda = scaling.map_or(1.0, |s| s.lambda_at(t));
        let (p, q, nv) = step_coeffs(schedule, kind, t, lambda)?;
        let e = match model {
            ChainModel::NoisyOracle { profile } | ChainModel::Analytic { perturbation: profile } => {
                profile.at(schedule, t)
            }
        };
        match model {
            ChainModel::NoisyOracle { .. } => {
                let v_new = p * p * v + q * q * s2 + 2.0 * p * q * c + q * q * e * e + nv;
                let c_new = p * c + q * s2;
                v = v_new;
                c = c_new;
            }
            ChainModel::Analytic { .. } => {
                let ab = schedule.alpha_bar(t);
                let gain = ab.sqrt() * s2 / (ab * s2 + (1.0 - ab));
                let a = p + q * gain;
                v = a * a * v + q * q * e * e + nv;
                c *= a;
            }
        }
        out.push(point(t - 1, v, c));
    }
    out.reverse();
    Ok(out)
}
