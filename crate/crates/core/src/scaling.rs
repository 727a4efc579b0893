//! Scaling schedules `lambda(t)` and their recovery from measured norm
//! ratios.
//!
//! The accumulation model treats the norm ratio as a discrete sum of
//! per-step contributions that each propagate linearly down the chain:
//!
//! ```text
//! g(t) - 1 = sum_{u = t+1}^{T'} (lambda_u - 1) (u - t)
//! ```
//!
//! Inversion fits the affine family `lambda(t) = k t + b` directly against
//! this model by least squares on the two exact basis series
//! `A(t) = sum u (u - t)` and `B(t) = sum (u - t)`, so noise-free
//! round-trips are exact rather than approximate.

use crate::{Error, Result};

/// When `|k| * T'` falls below this, a fitted linear schedule collapses to
/// uniform.
pub const UNIFORM_COLLAPSE_THRESHOLD: f64 = 0.002;

/// Default low-t cutoff for inversion fits; the region near t = 0 is
/// excluded as unreliable.
pub const DEFAULT_T_MIN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalingForm {
    Uniform { b: f64 },
    Linear { k: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSchedule {
    pub form: ScalingForm,
    /// Number of sampling steps the schedule is defined over.
    pub t_prime: usize,
}

impl ScalingSchedule {
    pub fn uniform(b: f64, t_prime: usize) -> Result<Self> {
        Self::checked(ScalingForm::Uniform { b }, t_prime)
    }

    pub fn linear(k: f64, b: f64, t_prime: usize) -> Result<Self> {
        Self::checked(ScalingForm::Linear { k, b }, t_prime)
    }

    fn checked(form: ScalingForm, t_prime: usize) -> Result<Self> {
        let s = Self { form, t_prime };
        for t in 1..=t_prime {
            if s.lambda_at(t) <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "lambda({t}) = {} is not positive",
                    s.lambda_at(t)
                )));
            }
        }
        Ok(s)
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        match self.form {
            ScalingForm::Uniform { b } => b,
            ScalingForm::Linear { k, b } => k * t as f64 + b,
        }
    }

    pub fn is_identity(&self) -> bool {
        match self.form {
            ScalingForm::Uniform { b } => b == 1.0,
            ScalingForm::Linear { k, b } => k == 0.0 && b == 1.0,
        }
    }
}

/// Measured (or synthesized) norm ratios `DeltaN(t)` on `t = 1..=T'`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormRatioSeries {
    /// `(t, ratio, n_samples)` in ascending t.
    pub points: Vec<(usize, f64, u64)>,
}

impl NormRatioSeries {
    pub fn new(points: Vec<(usize, f64, u64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "norm-ratio timesteps must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn t_max(&self) -> usize {
        self.points.last().map(|p| p.0).unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("t,ratio,n_samples\n");
        for &(t, r, n) in &self.points {
            let _ = writeln!(out, "{t},{r:.17e},{n}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("t,") {
                continue;
            }
            let mut it = line.split(',');
            let mut next = |what: &str| {
                it.next()
                    .ok_or_else(|| Error::Parse(format!("missing {what} in {line:?}")))
            };
            let t = next("t")?
                .parse()
                .map_err(|e| Error::Parse(format!("t: {e}")))?;
            let r = next("ratio")?
                .parse()
                .map_err(|e| Error::Parse(format!("ratio: {e}")))?;
            let n = next("n_samples")?
                .parse()
                .map_err(|e| Error::Parse(format!("n_samples: {e}")))?;
            points.push((t, r, n));
        }
        Self::new(points)
    }
}

/// Accumulate a scaling schedule into the norm-ratio series it would
/// produce under the linear-propagation model.
pub fn forward_accumulate(s: &ScalingSchedule, n_samples: u64) -> NormRatioSeries {
    let tp = s.t_prime;
    let points = (1..=tp)
        .map(|t| {
            let g = 1.0
                + (t + 1..=tp)
                    .map(|u| (s.lambda_at(u) - 1.0) * (u - t) as f64)
                    .sum::<f64>();
            (t, g, n_samples)
        })
        .collect();
    NormRatioSeries { points }
}

/// Recover an affine scaling schedule from a norm-ratio series.
///
/// Points below `t_min` are ignored. Returns `Uniform` when the fitted
/// slope is negligible over the domain.
pub fn invert_norm_ratio(g: &NormRatioSeries, t_min: usize) -> Result<ScalingSchedule> {
    let tp = g.t_max();
    let used: Vec<(usize, f64)> = g
        .points
        .iter()
        .filter(|&&(t, _, _)| t >= t_min)
        .map(|&(t, r, _)| (t, r))
        .collect();
    if used.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 points at t >= {t_min}, have {}",
            used.len()
        )));
    }
    // Normal equations for g(t) - 1 = k A(t) + (b - 1) B(t).
    let basis = |t: usize| {
        let mut a = 0.0;
        let mut b = 0.0;
        for u in t + 1..=tp {
            a += (u * (u - t)) as f64;
            b += (u - t) as f64;
        }
        (a, b)
    };
    let (mut saa, mut sab, mut sbb, mut say, mut sby) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, r) in &used {
        let (a, b) = basis(t);
        let y = r - 1.0;
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        say += a * y;
        sby += b * y;
    }
    let det = saa * sbb - sab * sab;
    if det.abs() < 1e-30 {
        return Err(Error::Numeric("degenerate inversion system".into()));
    }
    let k = (say * sbb - sby * sab) / det;
    let b = 1.0 + (sby * saa - say * sab) / det;
    let schedule = if k.abs() * (tp as f64) < UNIFORM_COLLAPSE_THRESHOLD {
        // fold the negligible slope into an equivalent mid-domain level
        ScalingSchedule::uniform(b + k * (tp as f64 + 1.0) / 2.0, tp)?
    } else {
        ScalingSchedule::linear(k, b, tp)?
    };
    // positivity over the whole domain, not just the fitted region
    for t in 1..=tp {
        if schedule.lambda_at(t) <= 0.0 {
            return Err(Error::Numeric(format!(
                "fitted schedule is non-positive at t = {t}"
            )));
        }
    }
    Ok(schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn lambda_values() {
        let u = ScalingSchedule::uniform(1.0, 20).unwrap();
        assert_eq!(u.lambda_at(7), 1.0);
        let l = ScalingSchedule::linear(0.0025, 1.0, 20).unwrap();
        assert_relative_eq!(l.lambda_at(20), 1.05, max_relative = 1e-12);
        for t in 1..20 {
            assert!(l.lambda_at(t + 1) > l.lambda_at(t));
        }
    }

    #[test]
    fn rejects_non_positive_lambda() {
        assert!(ScalingSchedule::uniform(0.0, 10).is_err());
        assert!(ScalingSchedule::linear(-0.2, 1.0, 10).is_err());
    }

    #[test]
    fn identity_series_inverts_to_uniform_one() {
        let s = ScalingSchedule::uniform(1.0, 20).unwrap();
        let g = forward_accumulate(&s, 1);
        let rec = invert_norm_ratio(&g, DEFAULT_T_MIN).unwrap();
        match rec.form {
            ScalingForm::Uniform { b } => assert_relative_eq!(b, 1.0, epsilon = 1e-12),
            other => panic!("expected uniform, got {other:?}"),
        }
    }

    #[test]
    fn uniform_round_trip() {
        let s = ScalingSchedule::uniform(1.002, 20).unwrap();
        let g = forward_accumulate(&s, 1);
        // closed form of the accumulation for a uniform schedule
        for &(t, r, _) in &g.points {
            let m = (20 - t) as f64;
            assert_relative_eq!(r, 1.0 + 0.002 * m * (m + 1.0) / 2.0, max_relative = 1e-12);
        }
        let rec = invert_norm_ratio(&g, DEFAULT_T_MIN).unwrap();
        match rec.form {
            ScalingForm::Uniform { b } => assert_relative_eq!(b, 1.002, epsilon = 1e-9),
            other => panic!("expected uniform, got {other:?}"),
        }
    }

    #[test]
    fn linear_round_trip() {
        let s = ScalingSchedule::linear(0.001, 1.0, 20).unwrap();
        let g = forward_accumulate(&s, 1);
        let rec = invert_norm_ratio(&g, DEFAULT_T_MIN).unwrap();
        match rec.form {
            ScalingForm::Linear { k, b } => {
                assert_relative_eq!(k, 0.001, epsilon = 1e-6);
                assert_relative_eq!(b, 1.0, epsilon = 1e-6);
            }
            other => panic!("expected linear, got {other:?}"),
        }
    }

    #[test]
    fn noise_robustness() {
        let truth = ScalingSchedule::linear(0.002, 1.01, 20).unwrap();
        let clean = forward_accumulate(&truth, 1);
        let mut ok = 0;
        for rep in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + rep);
            let noisy = NormRatioSeries {
                points: clean
                    .points
                    .iter()
                    .map(|&(t, r, n)| (t, r + 0.005 * rng.sample::<f64, _>(StandardNormal), n))
                    .collect(),
            };
            if let Ok(rec) = invert_norm_ratio(&noisy, DEFAULT_T_MIN) {
                if let ScalingForm::Linear { k, b } = rec.form {
                    if (k - 0.002).abs() <= 0.1 * 0.002 && (b - 1.01).abs() <= 0.1 * 1.01 {
                        ok += 1;
                    }
                }
            }
        }
        assert!(ok >= 90, "only {ok}/100 noisy inversions within 10%");
    }

    #[test]
    fn rejects_too_few_points() {
        let g = NormRatioSeries::new(vec![(5, 1.0, 1), (6, 1.0, 1), (7, 1.0, 1)]).unwrap();
        assert!(invert_norm_ratio(&g, 5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = ScalingSchedule::linear(0.001, 1.0, 10).unwrap();
        let g = forward_accumulate(&s, 4096);
        let parsed = NormRatioSeries::from_csv(&g.to_csv()).unwrap();
        assert_eq!(parsed, g);
    }

    #[test]
    fn tiny_slope_collapses_to_uniform() {
        let s = ScalingSchedule::linear(0.00001, 1.003, 20).unwrap();
        let g = forward_accumulate(&s, 1);
        let rec = invert_norm_ratio(&g, DEFAULT_T_MIN).unwrap();
        assert!(matches!(rec.form, ScalingForm::Uniform { .. }));
    }
}
