//! Epsilon predictors over toy data distributions.
//!
//! Every predictor returns both the noise estimate and the implied clean
//! sample; the two are tied together by the forward-process identity
//! `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`.

use crate::schedule::NoiseSchedule;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A noise prediction together with the implied clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsPrediction {
    pub eps: Vec<f64>,
    pub x0_hat: Vec<f64>,
}

impl EpsPrediction {
    /// Build from a noise estimate, deriving `x0_hat` by inversion at `(x, t)`.
    pub fn from_eps(schedule: &NoiseSchedule, x: &[f64], t: usize, eps: Vec<f64>) -> Self {
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0_hat = x
            .iter()
            .zip(&eps)
            .map(|(&xi, &ei)| (xi - sb * ei) / sa)
            .collect();
        Self { eps, x0_hat }
    }

    /// Build from a clean-sample estimate, deriving `eps` by inversion.
    pub fn from_x0(schedule: &NoiseSchedule, x: &[f64], t: usize, x0_hat: Vec<f64>) -> Self {
        let ab = schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let eps = x
            .iter()
            .zip(&x0_hat)
            .map(|(&xi, &x0)| (xi - sa * x0) / sb)
            .collect();
        Self { eps, x0_hat }
    }

    pub fn eps_norm(&self) -> f64 {
        self.eps.iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Divide the noise estimate by `lambda` and re-derive `x0_hat` so the
    /// pair stays consistent under the forward identity.
    pub fn scaled(&self, schedule: &NoiseSchedule, x: &[f64], t: usize, lambda: f64) -> Self {
        Self::from_eps(
            schedule,
            x,
            t,
            self.eps.iter().map(|e| e / lambda).collect(),
        )
    }
}

/// Per-chain evaluation context: the anchor (when the chain is tied to a
/// known clean sample) and the chain's own denoiser noise stream.
pub struct EvalCtx<'a> {
    pub anchor_x0: Option<&'a [f64]>,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64], t: usize, ctx: &mut EvalCtx) -> Result<EpsPrediction>;
}

/// Prediction-error scale `e_t`.
#[derive(Debug, Clone, Copy)]
pub enum ErrorProfile {
    Constant(f64),
    /// `c * sqrt(1 - abar_t)`
    Proportional(f64),
}

impl ErrorProfile {
    pub fn at(&self, schedule: &NoiseSchedule, t: usize) -> f64 {
        match *self {
            ErrorProfile::Constant(c) => c,
            ErrorProfile::Proportional(c) => c * (1.0 - schedule.alpha_bar(t)).sqrt(),
        }
    }
}

fn check_range(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.len() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.len(),
        });
    }
    Ok(())
}

/// The exact minimum-MSE predictor for Gaussian data: the posterior mean
/// `E[x_0 | x_t]`, computed in closed form.
pub struct AnalyticDenoiser {
    schedule: NoiseSchedule,
    mean: DVector<f64>,
    // per timestep: sqrt(abar_t) * Sigma * (abar_t Sigma + (1 - abar_t) I)^-1
    gains: Vec<DMatrix<f64>>,
}

impl AnalyticDenoiser {
    pub fn new(spec: &crate::data::GaussianDataSpec, schedule: &NoiseSchedule) -> Self {
        let n = spec.dim();
        let eye = DMatrix::identity(n, n);
        let gains = (1..=schedule.len())
            .map(|t| {
                let ab = schedule.alpha_bar(t);
                let denom = &spec.covariance * ab + &eye * (1.0 - ab);
                let inv = denom
                    .lu()
                    .try_inverse()
                    .expect("abar < 1 keeps the posterior precision nonsingular");
                &spec.covariance * inv * ab.sqrt()
            })
            .collect();
        Self {
            schedule: schedule.clone(),
            mean: spec.mean.clone(),
            gains,
        }
    }

    /// Posterior mean of `x_0` given `x_t = x`.
    pub fn posterior_mean(&self, x: &[f64], t: usize) -> Vec<f64> {
        let ab = self.schedule.alpha_bar(t);
        let xv = DVector::from_row_slice(x);
        let centered = xv - &self.mean * ab.sqrt();
        (&self.mean + &self.gains[t - 1] * centered).iter().copied().collect()
    }

    /// Jacobian of the posterior mean with respect to `x`.
    pub fn posterior_mean_jacobian(&self, t: usize) -> &DMatrix<f64> {
        &self.gains[t - 1]
    }
}

impl Denoiser for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn predict(&self, x: &[f64], t: usize, _ctx: &mut EvalCtx) -> Result<EpsPrediction> {
        check_range(&self.schedule, t)?;
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let x0_hat = self.posterior_mean(x, t);
        Ok(EpsPrediction::from_x0(&self.schedule, x, t, x0_hat))
    }
}

/// The anchored error model: `x0_hat = x_0 + e_t zeta` with fresh standard
/// normal `zeta`. Only usable on chains that carry their ground-truth anchor.
pub struct NoisyOracleDenoiser {
    schedule: NoiseSchedule,
    pub profile: ErrorProfile,
    dim: usize,
}

impl NoisyOracleDenoiser {
    pub fn new(dim: usize, profile: ErrorProfile, schedule: &NoiseSchedule) -> Self {
        Self {
            schedule: schedule.clone(),
            profile,
            dim,
        }
    }
}

impl Denoiser for NoisyOracleDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64], t: usize, ctx: &mut EvalCtx) -> Result<EpsPrediction> {
        check_range(&self.schedule, t)?;
        let anchor = ctx.anchor_x0.ok_or_else(|| {
            Error::InvalidArgument("noisy oracle requires an anchored chain".into())
        })?;
        if anchor.len() != self.dim || x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let e = self.profile.at(&self.schedule, t);
        let x0_hat = anchor
            .iter()
            .map(|&x0| x0 + e * ctx.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(EpsPrediction::from_x0(&self.schedule, x, t, x0_hat))
    }
}

/// Analytic posterior mean perturbed by `e_t zeta`; models an imperfect
/// trained network without requiring an anchor, so it can drive pure
/// generation from noise.
pub struct PerturbedAnalyticDenoiser {
    inner: AnalyticDenoiser,
    pub profile: ErrorProfile,
}

impl PerturbedAnalyticDenoiser {
    pub fn new(
        spec: &crate::data::GaussianDataSpec,
        schedule: &NoiseSchedule,
        profile: ErrorProfile,
    ) -> Self {
        Self {
            inner: AnalyticDenoiser::new(spec, schedule),
            profile,
        }
    }
}

impl Denoiser for PerturbedAnalyticDenoiser {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict(&self, x: &[f64], t: usize, ctx: &mut EvalCtx) -> Result<EpsPrediction> {
        check_range(&self.inner.schedule, t)?;
        let e = self.profile.at(&self.inner.schedule, t);
        let x0_hat = self
            .inner
            .posterior_mean(x, t)
            .into_iter()
            .map(|m| m + e * ctx.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(EpsPrediction::from_x0(&self.inner.schedule, x, t, x0_hat))
    }
}
