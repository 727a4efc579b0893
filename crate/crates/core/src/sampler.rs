//! Reverse-process samplers with an epsilon-scaling hook.
//!
//! All samplers walk the indices of the schedule they are given, so fast
//! sampling means passing the `effective` schedule of a `RespacedSchedule`.
//! Scaling, when present, divides the predicted epsilon by `lambda(t)` at
//! the step's own timestep; `lambda = 1` is skipped entirely so an identity
//! schedule is bitwise indistinguishable from no schedule.

use crate::denoiser::{Denoiser, EpsPrediction, EvalCtx};
use crate::rng::{stream_rng, STREAM_DENOISER, STREAM_INIT, STREAM_STEP_NOISE};
use crate::scaling::ScalingSchedule;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    Ddpm,
    Ddim { eta: f64 },
    Euler,
    Heun,
}

impl SamplerKind {
    pub fn is_stochastic(&self) -> bool {
        match *self {
            SamplerKind::Ddpm => true,
            SamplerKind::Ddim { eta } => eta > 0.0,
            SamplerKind::Euler | SamplerKind::Heun => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// The schedule actually stepped over (effective schedule when respaced).
    pub schedule: NoiseSchedule,
    pub scaling: Option<ScalingSchedule>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        if let SamplerKind::Ddim { eta } = kind {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::InvalidArgument(format!(
                    "eta must lie in [0, 1], got {eta}"
                )));
            }
        }
        Ok(Self {
            kind,
            schedule,
            scaling: None,
            seed,
        })
    }

    pub fn with_scaling(mut self, scaling: Option<ScalingSchedule>) -> Result<Self> {
        if let Some(s) = scaling {
            if s.t_prime != self.schedule.len() {
                return Err(Error::InvalidArgument(format!(
                    "scaling domain {} does not match schedule length {}",
                    s.t_prime,
                    self.schedule.len()
                )));
            }
        }
        self.scaling = scaling;
        Ok(self)
    }
}

/// One epsilon evaluation: the raw network output and the prediction the
/// step actually consumed (after scaling).
#[derive(Debug, Clone)]
pub struct StepEps {
    /// Timestep the evaluation was made at.
    pub t: usize,
    pub raw: EpsPrediction,
    pub applied: EpsPrediction,
}

#[derive(Debug, Clone)]
pub struct ChainRecord {
    /// States at levels `T', T'-1, ..., 0` (first entry is the initial x).
    pub states: Vec<Vec<f64>>,
    /// Epsilon evaluations per step; Heun records two.
    pub eps_trace: Vec<Vec<StepEps>>,
    pub anchor_x0: Option<Vec<f64>>,
    pub seed: u64,
    pub chain_id: u64,
}

impl ChainRecord {
    /// State at level `t` (0 = terminal sample).
    pub fn state_at(&self, t: usize) -> &[f64] {
        let top = self.states.len() - 1;
        &self.states[top - t]
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub enum ChainInit {
    /// `x_T ~ N(0, I)` from the chain's seed stream.
    FromNoise,
    /// `x_T` built from a known `x_0` via the forward process.
    Anchored(Vec<f64>),
}

/// One DDPM ancestral step `t -> t-1`. The noise argument is ignored at
/// `t = 1` (the final step is deterministic by convention).
pub fn ddpm_step(
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
    eps: &EpsPrediction,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.len() {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.len(),
        });
    }
    let a = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coef = schedule.beta(t) / (1.0 - ab).sqrt();
    let sd = if t == 1 {
        0.0
    } else {
        schedule.sampling_var(t).sqrt()
    };
    Ok(x.iter()
        .zip(&eps.eps)
        .zip(noise)
        .map(|((&xi, &ei), &zi)| (xi - coef * ei) / a.sqrt() + sd * zi)
        .collect())
}

/// One DDIM-family step `t -> t_prev` with noise scale `sigma = eta *
/// sqrt(posterior_var(t))`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
    t_prev: usize,
    eps: &EpsPrediction,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.len() || t_prev >= t {
        return Err(Error::TimestepOutOfRange {
            t,
            max: schedule.len(),
        });
    }
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma2 = eta * eta * schedule.posterior_var(t);
    let rem = 1.0 - ab_prev - sigma2;
    if rem < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "DDIM noise exceeds 1 - abar at t = {t}"
        )));
    }
    let (ca, cb, sd) = (ab_prev.sqrt(), rem.sqrt(), sigma2.sqrt());
    Ok(x.iter()
        .enumerate()
        .map(|(d, _)| ca * eps.x0_hat[d] + cb * eps.eps[d] + sd * noise[d])
        .collect())
}

/// Deterministic probability-flow step: DDIM with `eta = 0`.
pub fn euler_step(
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
    t_prev: usize,
    eps: &EpsPrediction,
) -> Result<Vec<f64>> {
    let zeros = vec![0.0; x.len()];
    ddim_step(schedule, x, t, t_prev, eps, 0.0, &zeros)
}

fn apply_scaling(
    schedule: &NoiseSchedule,
    scaling: Option<&ScalingSchedule>,
    x: &[f64],
    t: usize,
    raw: EpsPrediction,
) -> StepEps {
    let lambda = scaling.map_or(1.0, |s| s.lambda_at(t));
    let applied = if lambda == 1.0 {
        raw.clone()
    } else {
        raw.scaled(schedule, x, t, lambda)
    };
    StepEps { t, raw, applied }
}

/// Heun step: Euler predictor, epsilon re-evaluated at the predicted point,
/// both evaluations averaged and the DDIM(eta = 0) update re-applied from
/// `(x, t)`. Each evaluation is scaled at its own timestep.
pub fn heun_step(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    scaling: Option<&ScalingSchedule>,
    x: &[f64],
    t: usize,
    t_prev: usize,
    ctx: &mut EvalCtx,
) -> Result<(Vec<f64>, Vec<StepEps>)> {
    let e1 = apply_scaling(schedule, scaling, x, t, denoiser.predict(x, t, ctx)?);
    let x_pred = euler_step(schedule, x, t, t_prev, &e1.applied)?;
    if t_prev == 0 {
        return Ok((x_pred, vec![e1]));
    }
    let e2 = apply_scaling(
        schedule,
        scaling,
        &x_pred,
        t_prev,
        denoiser.predict(&x_pred, t_prev, ctx)?,
    );
    let avg: Vec<f64> = e1
        .applied
        .eps
        .iter()
        .zip(&e2.applied.eps)
        .map(|(&a, &b)| 0.5 * (a + b))
        .collect();
    let avg_pred = EpsPrediction::from_eps(schedule, x, t, avg);
    let next = euler_step(schedule, x, t, t_prev, &avg_pred)?;
    Ok((next, vec![e1, e2]))
}

/// Run one full reverse chain over the configured schedule.
pub fn run_chain(
    config: &SamplerConfig,
    denoiser: &dyn Denoiser,
    init: &ChainInit,
    chain_id: u64,
) -> Result<ChainRecord> {
    let sched = &config.schedule;
    let tp = sched.len();
    let dim = denoiser.dim();
    if let Some(s) = &config.scaling {
        if s.t_prime != tp {
            return Err(Error::InvalidArgument(
                "scaling domain does not match schedule length".into(),
            ));
        }
    }
    let mut init_rng = stream_rng(config.seed, chain_id, STREAM_INIT);
    let mut step_rng = stream_rng(config.seed, chain_id, STREAM_STEP_NOISE);
    let mut den_rng = stream_rng(config.seed, chain_id, STREAM_DENOISER);

    let (mut x, anchor_x0): (Vec<f64>, Option<Vec<f64>>) = match init {
        ChainInit::FromNoise => (
            (0..dim)
                .map(|_| init_rng.sample::<f64, _>(StandardNormal))
                .collect(),
            None,
        ),
        ChainInit::Anchored(x0) => {
            if x0.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: x0.len(),
                });
            }
            let ab = sched.alpha_bar(tp);
            let x = x0
                .iter()
                .map(|&x0i| {
                    ab.sqrt() * x0i
                        + (1.0 - ab).sqrt() * init_rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            (x, Some(x0.clone()))
        }
    };

    let mut states = Vec::with_capacity(tp + 1);
    let mut eps_trace = Vec::with_capacity(tp);
    states.push(x.clone());
    let scaling = config.scaling.as_ref();
    for t in (1..=tp).rev() {
        let step = match config.kind {
            SamplerKind::Heun => {
                let mut ctx = EvalCtx {
                    anchor_x0: anchor_x0.as_deref(),
                    rng: &mut den_rng,
                };
                let (next, evals) =
                    heun_step(denoiser, sched, scaling, &x, t, t - 1, &mut ctx)?;
                x = next;
                evals
            }
            kind => {
                let raw = {
                    let mut ctx = EvalCtx {
                        anchor_x0: anchor_x0.as_deref(),
                        rng: &mut den_rng,
                    };
                    denoiser.predict(&x, t, &mut ctx)?
                };
                let e = apply_scaling(sched, scaling, &x, t, raw);
                let noise: Vec<f64> = if kind.is_stochastic() && t > 1 {
                    (0..dim)
                        .map(|_| step_rng.sample::<f64, _>(StandardNormal))
                        .collect()
                } else {
                    vec![0.0; dim]
                };
                x = match kind {
                    SamplerKind::Ddpm => ddpm_step(sched, &x, t, &e.applied, &noise)?,
                    SamplerKind::Ddim { eta } => {
                        ddim_step(sched, &x, t, t - 1, &e.applied, eta, &noise)?
                    }
                    SamplerKind::Euler => euler_step(sched, &x, t, t - 1, &e.applied)?,
                    SamplerKind::Heun => unreachable!(),
                };
                vec![e]
            }
        };
        eps_trace.push(step);
        states.push(x.clone());
    }
    Ok(ChainRecord {
        states,
        eps_trace,
        anchor_x0,
        seed: config.seed,
        chain_id,
    })
}

/// Stream chain trajectories as CSV rows `(chain_id, t, x..., eps_norm)`.
/// `eps_norm` is the applied first evaluation at that level (empty at t=0).
pub fn chains_to_csv(records: &[ChainRecord], dim: usize) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("chain_id,t");
    for d in 0..dim {
        let _ = write!(out, ",x{d}");
    }
    out.push_str(",eps_norm\n");
    for rec in records {
        let top = rec.states.len() - 1;
        for (i, state) in rec.states.iter().enumerate() {
            let t = top - i;
            let _ = write!(out, "{},{}", rec.chain_id, t);
            for v in state {
                let _ = write!(out, ",{v:.17e}");
            }
            if t > 0 {
                let _ = writeln!(out, ",{:.17e}", rec.eps_trace[top - t].first().map_or(f64::NAN, |e| e.applied.eps_norm()));
            } else {
                out.push_str(",\n");
            }
        }
    }
    out
}
