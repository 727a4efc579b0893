//! Monte Carlo measurements of exposure bias and variance error.
//!
//! Estimators pool every residual coordinate at a timestep into one scalar
//! population variance. Work is split into fixed-size shards that are
//! merged in shard order, so results are byte-identical regardless of how
//! many threads execute them.

use crate::data::DataSampler;
use crate::denoiser::{Denoiser, EvalCtx};
use crate::rng::{
    stream_rng, STREAM_DATA, STREAM_DENOISER, STREAM_INIT, STREAM_STEP_NOISE,
};
use crate::sampler::{ddim_step, ddpm_step, run_chain, ChainInit, ChainRecord, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::stats::MomentAccumulator;
use crate::theory::StepKind;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const SHARD_SIZE: u64 = 1024;
const MIN_SAMPLES: u64 = 1000;

/// Per-timestep aggregates. Fields that a given measurement does not
/// produce are `NaN`.
#[derive(Debug, Clone, Copy)]
pub struct BiasRow {
    pub t: usize,
    /// `1 - abar_t`.
    pub train_var: f64,
    /// Pooled Monte Carlo residual variance at `t`.
    pub measured_var: f64,
    pub measured_var_se: f64,
    /// `(sqrt(measured) - sqrt(train))^2`.
    pub delta: f64,
    /// Signed single-step variance error.
    pub single_err: f64,
    /// Signed multi-step variance error.
    pub multi_err: f64,
    pub eps_norm_train: f64,
    pub eps_norm_train_se: f64,
    pub eps_norm_sample: f64,
    pub eps_norm_sample_se: f64,
    /// `eps_norm_sample / eps_norm_train`.
    pub norm_ratio: f64,
    pub n: u64,
}

impl BiasRow {
    fn empty(t: usize, train_var: f64) -> Self {
        Self {
            t,
            train_var,
            measured_var: f64::NAN,
            measured_var_se: f64::NAN,
            delta: f64::NAN,
            single_err: f64::NAN,
            multi_err: f64::NAN,
            eps_norm_train: f64::NAN,
            eps_norm_train_se: f64::NAN,
            eps_norm_sample: f64::NAN,
            eps_norm_sample_se: f64::NAN,
            norm_ratio: f64::NAN,
            n: 0,
        }
    }

    fn set_variance(&mut self, acc: &MomentAccumulator) {
        self.measured_var = acc.variance();
        self.measured_var_se = acc.variance_se();
        self.delta = frechet_gap_1d(self.measured_var, self.train_var)
            .unwrap_or(f64::NAN);
        self.n = acc.count();
    }
}

#[derive(Debug, Clone)]
pub struct BiasReport {
    /// Rows in ascending timestep order.
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    pub fn row(&self, t: usize) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.t == t)
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from(
            "t,train_var,measured_var,measured_var_se,delta,single_err,multi_err,\
             eps_norm_train,eps_norm_train_se,eps_norm_sample,eps_norm_sample_se,norm_ratio,n\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                r.t,
                r.train_var,
                r.measured_var,
                r.measured_var_se,
                r.delta,
                r.single_err,
                r.multi_err,
                r.eps_norm_train,
                r.eps_norm_train_se,
                r.eps_norm_sample,
                r.eps_norm_sample_se,
                r.norm_ratio,
                r.n
            );
        }
        out
    }
}

fn check_n(n: u64) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    Ok(())
}

/// Run `worker` over fixed-size id shards and merge the per-shard
/// accumulator vectors in shard order.
fn sharded_accumulate<F>(n: u64, slots: usize, worker: F) -> Result<Vec<MomentAccumulator>>
where
    F: Fn(std::ops::Range<u64>) -> Result<Vec<MomentAccumulator>> + Sync,
{
    let shards: Vec<std::ops::Range<u64>> = (0..n)
        .step_by(SHARD_SIZE as usize)
        .map(|lo| lo..(lo + SHARD_SIZE).min(n))
        .collect();
    let partials: Result<Vec<Vec<MomentAccumulator>>> =
        shards.into_par_iter().map(&worker).collect();
    let mut merged = vec![MomentAccumulator::new(); slots];
    for part in partials? {
        for (m, p) in merged.iter_mut().zip(&part) {
            m.merge(p);
        }
    }
    Ok(merged)
}

/// Algorithm-1 style measurement: anchored chains, pooled residual variance
/// `beta_hat_t` at every level, and both the Frechet form `delta_t` and the
/// signed error `Delta'_t`.
pub fn measure_delta_t(
    denoiser: &dyn Denoiser,
    config: &SamplerConfig,
    data: &dyn DataSampler,
    n_chains: u64,
) -> Result<BiasReport> {
    check_n(n_chains)?;
    let sched = &config.schedule;
    let tp = sched.len();
    let dim = denoiser.dim();
    let accs = sharded_accumulate(n_chains, tp, |range| {
        let mut accs = vec![MomentAccumulator::new(); tp];
        for chain_id in range {
            let mut data_rng = stream_rng(config.seed, chain_id, STREAM_DATA);
            let x0 = data.sample(&mut data_rng);
            let rec = run_chain(config, denoiser, &ChainInit::Anchored(x0.clone()), chain_id)?;
            for u in 0..tp {
                let ab = sched.alpha_bar(u);
                let state = rec.state_at(u);
                for d in 0..dim {
                    accs[u].push(state[d] - ab.sqrt() * x0[d]);
                }
            }
        }
        Ok(accs)
    })?;
    let rows = (0..tp)
        .map(|u| {
            let mut row = BiasRow::empty(u, 1.0 - sched.alpha_bar(u));
            row.set_variance(&accs[u]);
            row.multi_err = row.measured_var - row.train_var;
            row
        })
        .collect();
    Ok(BiasReport { rows })
}

/// Algorithm-3 reporting of the same measurement (signed errors).
pub fn measure_multi_step_error(
    denoiser: &dyn Denoiser,
    config: &SamplerConfig,
    data: &dyn DataSampler,
    n_chains: u64,
) -> Result<BiasReport> {
    measure_delta_t(denoiser, config, data, n_chains)
}

/// Algorithm-2 style measurement: for each `t`, build the true `x_t`, take
/// one reverse step and compare the residual variance at `t - 1` against
/// `1 - abar_{t-1}`.
pub fn measure_single_step_error(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    data: &dyn DataSampler,
    kind: StepKind,
    n: u64,
    seed: u64,
) -> Result<BiasReport> {
    measure_k_step_error(denoiser, schedule, data, kind, 1, n, seed)
}

/// Two-step DDPM variant used against the Table-6 oracle.
pub fn measure_two_step_error(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    data: &dyn DataSampler,
    n: u64,
    seed: u64,
) -> Result<BiasReport> {
    measure_k_step_error(denoiser, schedule, data, StepKind::Ddpm, 2, n, seed)
}

fn measure_k_step_error(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    data: &dyn DataSampler,
    kind: StepKind,
    k_steps: usize,
    n: u64,
    seed: u64,
) -> Result<BiasReport> {
    check_n(n)?;
    let tp = schedule.len();
    let dim = denoiser.dim();
    // start levels s = k..=tp measure at s - k
    let starts: Vec<usize> = (k_steps..=tp).collect();
    let mut rows: Vec<BiasRow> = Vec::new();
    for &s in &starts {
        let target = s - k_steps;
        let accs = sharded_accumulate(n, 1, |range| {
            let mut acc = MomentAccumulator::new();
            for i in range {
                // unique ids per (start level, draw)
                let id = (s as u64) << 40 | i;
                let mut data_rng = stream_rng(seed, id, STREAM_DATA);
                let mut fwd_rng = stream_rng(seed, id, STREAM_INIT);
                let mut step_rng = stream_rng(seed, id, STREAM_STEP_NOISE);
                let mut den_rng = stream_rng(seed, id, STREAM_DENOISER);
                let x0 = data.sample(&mut data_rng);
                let ab = schedule.alpha_bar(s);
                let mut x: Vec<f64> = x0
                    .iter()
                    .map(|&x0i| {
                        ab.sqrt() * x0i
                            + (1.0 - ab).sqrt() * fwd_rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                for t in ((target + 1)..=s).rev() {
                    let pred = {
                        let mut ctx = EvalCtx {
                            anchor_x0: Some(&x0),
                            rng: &mut den_rng,
                        };
                        denoiser.predict(&x, t, &mut ctx)?
                    };
                    let noise: Vec<f64> = if t > 1 && matches!(kind, StepKind::Ddpm) {
                        (0..dim)
                            .map(|_| step_rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    } else {
                        vec![0.0; dim]
                    };
                    x = match kind {
                        StepKind::Ddpm => ddpm_step(schedule, &x, t, &pred, &noise)?,
                        StepKind::Ddim { eta } => {
                            ddim_step(schedule, &x, t, t - 1, &pred, eta, &noise)?
                        }
                    };
                }
                let ab_tgt = schedule.alpha_bar(target);
                for d in 0..dim {
                    acc.push(x[d] - ab_tgt.sqrt() * x0[d]);
                }
            }
            Ok(vec![acc])
        })?;
        let mut row = BiasRow::empty(target, 1.0 - schedule.alpha_bar(target));
        row.set_variance(&accs[0]);
        let err = row.measured_var - row.train_var;
        if k_steps == 1 {
            row.single_err = err;
        } else {
            row.multi_err = err;
        }
        rows.push(row);
    }
    rows.sort_by_key(|r| r.t);
    Ok(BiasReport { rows })
}

/// Fig.-2 style norm curves: the mean prediction norm on ground-truth
/// inputs (training) versus along real anchored chains (sampling), and
/// their ratio `DeltaN(t)`.
pub fn measure_eps_norms(
    denoiser: &dyn Denoiser,
    config: &SamplerConfig,
    data: &dyn DataSampler,
    n: u64,
) -> Result<BiasReport> {
    check_n(n)?;
    let sched = &config.schedule;
    let tp = sched.len();
    // slots: [0..tp) training norms at t = slot + 1, [tp..2tp) sampling
    let accs = sharded_accumulate(n, 2 * tp, |range| {
        let mut accs = vec![MomentAccumulator::new(); 2 * tp];
        for chain_id in range {
            let mut data_rng = stream_rng(config.seed, chain_id, STREAM_DATA);
            let x0 = data.sample(&mut data_rng);
            // training curve: fresh ground-truth x_t at every t
            let mut fwd_rng = stream_rng(config.seed, chain_id, STREAM_INIT);
            let mut den_rng = stream_rng(config.seed, chain_id, STREAM_DENOISER);
            for t in 1..=tp {
                let ab = sched.alpha_bar(t);
                let xt: Vec<f64> = x0
                    .iter()
                    .map(|&x0i| {
                        ab.sqrt() * x0i
                            + (1.0 - ab).sqrt() * fwd_rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                let mut ctx = EvalCtx {
                    anchor_x0: Some(&x0),
                    rng: &mut den_rng,
                };
                let pred = denoiser.predict(&xt, t, &mut ctx)?;
                accs[t - 1].push(pred.eps_norm());
            }
            // sampling curve: the raw prediction at each visited state,
            // on a chain id offset so its streams do not alias the above
            let rec = run_chain(
                config,
                denoiser,
                &ChainInit::Anchored(x0.clone()),
                chain_id | 1 << 48,
            )?;
            for step in &rec.eps_trace {
                let first = &step[0];
                accs[tp + first.t - 1].push(first.raw.eps_norm());
            }
        }
        Ok(accs)
    })?;
    let rows = (1..=tp)
        .map(|t| {
            let mut row = BiasRow::empty(t, 1.0 - sched.alpha_bar(t));
            let train = &accs[t - 1];
            let samp = &accs[tp + t - 1];
            row.eps_norm_train = train.mean();
            row.eps_norm_train_se = train.mean_se();
            row.eps_norm_sample = samp.mean();
            row.eps_norm_sample_se = samp.mean_se();
            row.norm_ratio = samp.mean() / train.mean();
            row.n = train.count();
            row
        })
        .collect();
    Ok(BiasReport { rows })
}

/// `(sqrt(v1) - sqrt(v2))^2`, the per-dimension Frechet gap between two
/// centered 1D Gaussians.
pub fn frechet_gap_1d(var_sampled: f64, var_train: f64) -> Result<f64> {
    if var_sampled < 0.0 || var_train < 0.0 {
        return Err(Error::InvalidArgument(
            "variances must be non-negative".into(),
        ));
    }
    Ok((var_sampled.sqrt() - var_train.sqrt()).powi(2))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if (m - m.transpose()).amax() > 1e-9 {
        return Err(Error::InvalidArgument("matrix must be symmetric".into()));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-9) {
        return Err(Error::InvalidArgument(
            "matrix must be positive semi-definite".into(),
        ));
    }
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Squared Frechet distance between two Gaussians.
pub fn frechet_gaussian(
    mean1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mean2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    if mean1.len() != mean2.len() || cov1.nrows() != mean1.len() || cov2.nrows() != mean2.len() {
        return Err(Error::DimensionMismatch {
            expected: mean1.len(),
            got: mean2.len(),
        });
    }
    let s1 = psd_sqrt(cov1)?;
    let _ = psd_sqrt(cov2)?; // validates PSD-ness of cov2
    let inner = psd_sqrt(&(&s1 * cov2 * &s1))?;
    let mean_term = (mean1 - mean2).norm_squared();
    let trace_term = (cov1 + cov2 - inner * 2.0).trace();
    Ok(mean_term + trace_term.max(0.0))
}

/// Sample mean and covariance of the terminal states of a set of chains.
pub fn terminal_moments(records: &[ChainRecord], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = records.len() as f64;
    let mut mean = DVector::zeros(dim);
    for rec in records {
        mean += DVector::from_row_slice(rec.terminal());
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for rec in records {
        let d = DVector::from_row_slice(rec.terminal()) - &mean;
        cov += &d * d.transpose();
    }
    cov /= n;
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GaussianDataSpec;
    use crate::data::GaussianData;
    use crate::denoiser::{ErrorProfile, NoisyOracleDenoiser};
    use crate::sampler::SamplerKind;
    use crate::schedule::{default_linear_schedule, respace};
    use crate::theory::ddpm_single_step_var;
    use approx::assert_relative_eq;

    fn grid(tp: usize) -> NoiseSchedule {
        respace(&default_linear_schedule(1000).unwrap(), tp)
            .unwrap()
            .effective
    }

    fn unit_data() -> GaussianData {
        GaussianData::new(GaussianDataSpec::unit(1))
    }

    #[test]
    fn zero_error_single_step_is_unbiased() {
        let s = grid(10);
        let den = NoisyOracleDenoiser::new(1, ErrorProfile::Constant(0.0), &s);
        let rep =
            measure_single_step_error(&den, &s, &unit_data(), StepKind::Ddpm, 20_000, 1).unwrap();
        for row in &rep.rows {
            // the absolute floor absorbs pure float rounding at t = 0,
            // where the e = 0 step is exact
            assert!(
                row.single_err.abs() <= 3.0 * row.measured_var_se + 1e-28,
                "t={}: err {} vs 3SE {}",
                row.t,
                row.single_err,
                3.0 * row.measured_var_se
            );
        }
    }

    #[test]
    fn single_step_matches_table_one_oracle() {
        let s = grid(20);
        let den = NoisyOracleDenoiser::new(1, ErrorProfile::Constant(0.1), &s);
        let rep =
            measure_single_step_error(&den, &s, &unit_data(), StepKind::Ddpm, 100_000, 2).unwrap();
        for t in [1, 5, 10, 15] {
            let row = rep.row(t).unwrap();
            let want = ddpm_single_step_var(&s, t, 0.1).unwrap().sampled_var;
            let tol = (0.02 * want).max(3.0 * row.measured_var_se);
            assert!(
                (row.measured_var - want).abs() <= tol,
                "t={t}: got {}, want {want}",
                row.measured_var
            );
        }
    }

    #[test]
    fn delta_report_shape_and_consistency() {
        let s = grid(10);
        let den = NoisyOracleDenoiser::new(1, ErrorProfile::Constant(0.1), &s);
        let cfg = SamplerConfig::new(SamplerKind::Ddpm, s.clone(), 5).unwrap();
        let rep = measure_delta_t(&den, &cfg, &unit_data(), 2000).unwrap();
        assert_eq!(rep.rows.len(), 10);
        for row in &rep.rows {
            assert!(row.delta >= 0.0);
            assert_relative_eq!(
                row.delta,
                frechet_gap_1d(row.measured_var, row.train_var).unwrap(),
                max_relative = 1e-12
            );
            assert_eq!(row.n, 2000);
        }
    }

    #[test]
    fn delta_measurement_is_deterministic() {
        let s = grid(5);
        let den = NoisyOracleDenoiser::new(1, ErrorProfile::Constant(0.1), &s);
        let cfg = SamplerConfig::new(SamplerKind::Ddpm, s, 9).unwrap();
        let a = measure_delta_t(&den, &cfg, &unit_data(), 3000).unwrap();
        let b = measure_delta_t(&den, &cfg, &unit_data(), 3000).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.measured_var, rb.measured_var);
        }
    }

    #[test]
    fn rejects_tiny_sample_counts() {
        let s = grid(5);
        let den = NoisyOracleDenoiser::new(1, ErrorProfile::Constant(0.1), &s);
        let cfg = SamplerConfig::new(SamplerKind::Ddpm, s.clone(), 0).unwrap();
        assert!(measure_delta_t(&den, &cfg, &unit_data(), 999).is_err());
        assert!(
            measure_single_step_error(&den, &s, &unit_data(), StepKind::Ddpm, 10, 0).is_err()
        );
    }

    #[test]
    fn norm_ratio_is_one_at_top_step() {
        let s = grid(10);
        let den = NoisyOracleDenoiser::new(1, ErrorProfile::Constant(0.1), &s);
        let cfg = SamplerConfig::new(SamplerKind::Ddpm, s.clone(), 3).unwrap();
        let rep = measure_eps_norms(&den, &cfg, &unit_data(), 20_000).unwrap();
        let top = rep.row(10).unwrap();
        let se = (top.eps_norm_train_se.powi(2) + top.eps_norm_sample_se.powi(2)).sqrt();
        assert!(
            (top.eps_norm_sample - top.eps_norm_train).abs() <= 3.0 * se,
            "norm gap at T: {} vs {}",
            top.eps_norm_sample,
            top.eps_norm_train
        );
    }

    #[test]
    fn frechet_gap_basics() {
        assert_eq!(frechet_gap_1d(2.0, 2.0).unwrap(), 0.0);
        assert_relative_eq!(frechet_gap_1d(4.0, 1.0).unwrap(), 1.0);
        assert!(frechet_gap_1d(-1.0, 1.0).is_err());
    }

    #[test]
    fn frechet_gaussian_cases() {
        let eye = DMatrix::identity(2, 2);
        let zero = DVector::zeros(2);
        assert_relative_eq!(
            frechet_gaussian(&zero, &eye, &zero, &eye).unwrap(),
            0.0,
            epsilon = 1e-10
        );
        let shifted = DVector::from_vec(vec![3.0, 4.0]);
        assert_relative_eq!(
            frechet_gaussian(&zero, &eye, &shifted, &eye).unwrap(),
            25.0,
            max_relative = 1e-10
        );
        // 1D reduction
        let v1 = DMatrix::from_element(1, 1, 4.0);
        let v2 = DMatrix::from_element(1, 1, 1.0);
        let z1 = DVector::zeros(1);
        assert_relative_eq!(
            frechet_gaussian(&z1, &v1, &z1, &v2).unwrap(),
            frechet_gap_1d(4.0, 1.0).unwrap(),
            max_relative = 1e-10
        );
    }

    #[test]
    fn frechet_rejects_asymmetric() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let eye = DMatrix::identity(2, 2);
        let zero = DVector::zeros(2);
        assert!(frechet_gaussian(&zero, &bad, &zero, &eye).is_err());
    }
}
