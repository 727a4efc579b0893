//! One-pass, mergeable moment accumulation and small statistical helpers.

/// Online accumulator for central moments up to order four.
///
/// Merging two partial accumulators gives the same result as a single
/// sequential pass, which keeps shard-parallel estimates independent of the
/// shard layout.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0)
            + 6.0 * delta_n2 * self.m2
            - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        let delta2 = delta * delta;
        let delta3 = delta2 * delta;
        let delta4 = delta3 * delta;
        let m2 = self.m2 + other.m2 + delta2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + delta3 * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + delta4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * delta2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        self.mean += delta * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance (divide by n), matching a plain `var` over the
    /// pooled values.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    /// Standard error of the population-variance estimate,
    /// `sqrt((m4 - m2^2) / n)` from the sample's own fourth moment.
    pub fn variance_se(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        let n = self.n as f64;
        let m2 = self.m2 / n;
        let m4 = self.m4 / n;
        ((m4 - m2 * m2).max(0.0) / n).sqrt()
    }

    /// Standard error of the mean.
    pub fn mean_se(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

fn rank(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (rank(xs), rank(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    cov / (vx * vy).sqrt()
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
    fn matches_two_pass_moments() {
        let xs = [1.5, -0.3, 2.2, 0.0, -1.1, 0.7];
        let mut acc = MomentAccumulator::new();
        for &x in &xs {
            acc.push(x);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert_relative_eq!(acc.mean(), mean, max_relative = 1e-14);
        assert_relative_eq!(acc.variance(), var, max_relative = 1e-14);
    }

    #[test]
    fn merge_equals_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut seq = MomentAccumulator::new();
        for &x in &xs {
            seq.push(x);
        }
        // merge in uneven shards
        let mut merged = MomentAccumulator::new();
        for chunk in xs.chunks(733) {
            let mut part = MomentAccumulator::new();
            for &x in chunk {
                part.push(x);
            }
            merged.merge(&part);
        }
        assert_relative_eq!(merged.variance(), seq.variance(), max_relative = 1e-9);
        assert_relative_eq!(merged.mean(), seq.mean(), max_relative = 1e-9);
        assert_relative_eq!(merged.variance_se(), seq.variance_se(), max_relative = 1e-9);
    }

    #[test]
    fn variance_estimator_is_calibrated() {
        // i.i.d. normal residuals of known variance: the estimate lands
        // within 4 standard errors in at least 99% of repetitions
        let v: f64 = 2.5;
        let reps = 1000;
        let mut hits = 0;
        for rep in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let mut acc = MomentAccumulator::new();
            for _ in 0..1000 {
                acc.push(v.sqrt() * rng.sample::<f64, _>(StandardNormal));
            }
            if (acc.variance() - v).abs() <= 4.0 * acc.variance_se() {
                hits += 1;
            }
        }
        assert!(hits >= 990, "only {hits}/1000 within 4 SE");
    }

    #[test]
    fn spearman_monotone_and_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 20.0, 30.0, 40.0];
        assert_relative_eq!(spearman(&xs, &ys), 1.0);
        let yr = [40.0, 30.0, 20.0, 10.0];
        assert_relative_eq!(spearman(&xs, &yr), -1.0);
        let yt = [1.0, 1.0, 2.0, 2.0];
        assert!(spearman(&xs, &yt) > 0.8);
    }
}
