//! Toy data distributions the laboratory operates on.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A Gaussian data distribution with arbitrary symmetric PSD covariance.
#[derive(Debug, Clone)]
pub struct GaussianDataSpec {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianDataSpec {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: covariance.nrows(),
            });
        }
        if (&covariance - covariance.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("covariance must be symmetric".into()));
        }
        let eig = covariance.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12) {
            return Err(Error::InvalidArgument(
                "covariance must be positive semi-definite".into(),
            ));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
        })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            covariance: DMatrix::identity(dim, dim),
        }
    }

    pub fn diagonal(mean: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if vars.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: vars.len(),
            });
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance: DMatrix::from_diagonal(&DVector::from_vec(vars)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Source of i.i.d. data samples `x_0`.
pub trait DataSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// First two moments of the distribution, used as the reference for
    /// Frechet-distance evaluations.
    fn moments(&self) -> (DVector<f64>, DMatrix<f64>);
}

/// Samples from a `GaussianDataSpec` via its Cholesky-like factor.
pub struct GaussianData {
    spec: GaussianDataSpec,
    factor: DMatrix<f64>,
}

impl GaussianData {
    pub fn new(spec: GaussianDataSpec) -> Self {
        // symmetric square root; works for semi-definite covariances too
        let eig = spec.covariance.clone().symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        Self { spec, factor }
    }

    pub fn spec(&self) -> &GaussianDataSpec {
        &self.spec
    }
}

impl DataSampler for GaussianData {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.spec.mean + &self.factor * z).iter().copied().collect()
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        (self.spec.mean.clone(), self.spec.covariance.clone())
    }
}

/// Mixture of isotropic-or-diagonal Gaussian components.
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    std_devs: Vec<DVector<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, std_devs: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != std_devs.len() {
            return Err(Error::InvalidArgument(
                "mixture component lists must be non-empty and equal-length".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("weights must be non-negative".into()));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) || std_devs.iter().any(|s| s.len() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, got: 0 });
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            means: means.into_iter().map(DVector::from_vec).collect(),
            std_devs: std_devs.into_iter().map(DVector::from_vec).collect(),
        })
    }

    /// Two symmetric 1D components at +/- `offset` with common sigma.
    pub fn symmetric_pair_1d(offset: f64, sigma: f64) -> Self {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![-offset], vec![offset]],
            vec![vec![sigma], vec![sigma]],
        )
        .unwrap()
    }

    /// Two 2D components, the standard end-to-end testbed.
    pub fn symmetric_pair_2d(offset: f64, sigma: f64) -> Self {
        Self::new(
            vec![0.5, 0.5],
            vec![vec![-offset, -offset], vec![offset, offset]],
            vec![vec![sigma, sigma], vec![sigma, sigma]],
        )
        .unwrap()
    }
}

impl DataSampler for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        (0..self.dim())
            .map(|d| {
                self.means[k][d] + self.std_devs[k][d] * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim();
        let mut mean = DVector::zeros(n);
        for (w, m) in self.weights.iter().zip(&self.means) {
            mean += m * *w;
        }
        let mut cov = DMatrix::zeros(n, n);
        for ((w, m), s) in self.weights.iter().zip(&self.means).zip(&self.std_devs) {
            let d = m - &mean;
            cov += (&d * d.transpose() + DMatrix::from_diagonal(&s.map(|x| x * x))) * *w;
        }
        (mean, cov)
    }
}
