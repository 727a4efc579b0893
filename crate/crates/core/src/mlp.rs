//! A small fully-connected epsilon predictor with in-repo backpropagation.
//!
//! The network maps `concat(x, t/T)` to a noise estimate through tanh hidden
//! layers. Training minimises the standard epsilon-prediction objective with
//! an RMSProp-style adaptive step (no momentum). The architecture is small
//! enough that hand-rolled gradients stay auditable and the finite-difference
//! check below stays meaningful.

use crate::data::DataSampler;
use crate::denoiser::{Denoiser, EpsPrediction, EvalCtx};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FORMAT_TAG: &str = "difflab-mlp v1";

#[derive(Debug, Clone)]
struct Layer {
    // row-major out x in
    w: Vec<f64>,
    b: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            w: vec![0.0; rows * cols],
            b: vec![0.0; rows],
            rows,
            cols,
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            w: (0..rows * cols)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
                .collect(),
            b: vec![0.0; rows],
            rows,
            cols,
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    layers: Vec<Layer>,
    dim: usize,
    t_steps: usize,
}

impl MlpDenoiser {
    /// Fresh network with the given hidden widths; `t_steps` fixes the
    /// timestep normalisation `t / T`.
    pub fn new(dim: usize, hidden: &[usize], t_steps: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let layers = sizes
            .windows(2)
            .map(|w| Layer::glorot(w[1], w[0], rng))
            .collect();
        Self {
            layers,
            dim,
            t_steps,
        }
    }

    pub fn zeroed(dim: usize, hidden: &[usize], t_steps: usize) -> Self {
        let mut sizes = vec![dim + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect();
        Self {
            layers,
            dim,
            t_steps,
        }
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    fn input_vec(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend_from_slice(x);
        input.push(t as f64 / self.t_steps as f64);
        input
    }

    /// Deterministic forward pass.
    pub fn forward(&self, x: &[f64], t: usize) -> Vec<f64> {
        let mut cur = self.input_vec(x, t);
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i != last {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Forward with cached activations, squared-error loss against `target`
    /// and gradient accumulation into `grads`. Returns the per-element loss.
    fn backprop(&self, x: &[f64], t: usize, target: &[f64], grads: &mut [Layer]) -> f64 {
        let input = self.input_vec(x, t);
        // activations[i] is the input to layer i
        let mut activations = vec![input];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(activations.last().unwrap(), &mut out);
            if i != last {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            activations.push(out);
        }
        let output = activations.last().unwrap();
        let n_out = output.len() as f64;
        let loss = output
            .iter()
            .zip(target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            / n_out;
        // d(loss)/d(output)
        let mut delta: Vec<f64> = output
            .iter()
            .zip(target)
            .map(|(o, t)| 2.0 * (o - t) / n_out)
            .collect();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &activations[i];
            if i != last {
                // activations[i+1] holds tanh outputs of this layer
                for (d, a) in delta.iter_mut().zip(&activations[i + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let g = &mut grads[i];
            for r in 0..layer.rows {
                g.b[r] += delta[r];
                let row = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += delta[r] * xi;
                }
            }
            if i > 0 {
                let mut prev = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += delta[r] * wi;
                    }
                }
                delta = prev;
            }
        }
        loss
    }

    /// Serialize to a flat text format with a version header.
    pub fn save(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_TAG}");
        let _ = writeln!(out, "dim,{}", self.dim);
        let _ = writeln!(out, "t_steps,{}", self.t_steps);
        let _ = writeln!(out, "layers,{}", self.layers.len());
        for layer in &self.layers {
            let _ = writeln!(out, "layer,{},{}", layer.rows, layer.cols);
            for v in layer.w.iter().chain(&layer.b) {
                let _ = writeln!(out, "{v:.17e}");
            }
        }
        out
    }

    pub fn load(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != FORMAT_TAG {
            return Err(Error::Parse(format!("unknown weight format: {header:?}")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {name}")))?;
            let (key, val) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad {name} line")))?;
            if key != name {
                return Err(Error::Parse(format!("expected {name}, got {key}")));
            }
            val.trim()
                .parse()
                .map_err(|e| Error::Parse(format!("{name}: {e}")))
        };
        let dim = field("dim")?;
        let t_steps = field("t_steps")?;
        let n_layers = field("layers")?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("missing layer header".into()))?;
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 || parts[0] != "layer" {
                return Err(Error::Parse(format!("bad layer header: {line:?}")));
            }
            let rows: usize = parts[1].parse().map_err(|e| Error::Parse(format!("{e}")))?;
            let cols: usize = parts[2].parse().map_err(|e| Error::Parse(format!("{e}")))?;
            let mut layer = Layer::zeros(rows, cols);
            for slot in layer.w.iter_mut().chain(layer.b.iter_mut()) {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Parse("truncated weights".into()))?;
                *slot = line
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("weight: {e}")))?;
            }
            layers.push(layer);
        }
        Ok(Self {
            layers,
            dim,
            t_steps,
        })
    }
}

/// An MLP bound to the schedule it was trained on.
pub struct MlpEps {
    pub model: MlpDenoiser,
    schedule: NoiseSchedule,
}

impl MlpEps {
    pub fn new(model: MlpDenoiser, schedule: &NoiseSchedule) -> Self {
        Self {
            model,
            schedule: schedule.clone(),
        }
    }
}

impl Denoiser for MlpEps {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn predict(&self, x: &[f64], t: usize, _ctx: &mut EvalCtx) -> Result<EpsPrediction> {
        if t == 0 || t > self.schedule.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.schedule.len(),
            });
        }
        if x.len() != self.model.dim {
            return Err(Error::DimensionMismatch {
                expected: self.model.dim,
                got: x.len(),
            });
        }
        let eps = self.model.forward(x, t);
        Ok(EpsPrediction::from_eps(&self.schedule, x, t, eps))
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            learning_rate: 1e-3,
            rms_decay: 0.999,
            seed: 0,
        }
    }
}

pub struct TrainOutcome {
    pub model: MlpDenoiser,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, smoothed loss)` pairs for the loss-curve CSV.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Train on the epsilon-prediction objective over uniformly sampled
/// timesteps.
pub fn train_mlp(
    data: &dyn DataSampler,
    schedule: &NoiseSchedule,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let dim = data.dim();
    let mut rng = crate::rng::stream_rng(cfg.seed, 0, crate::rng::STREAM_INIT);
    let mut model = MlpDenoiser::new(dim, hidden, schedule.len(), &mut rng);
    let mut grads: Vec<Layer> = model
        .layers
        .iter()
        .map(|l| Layer::zeros(l.rows, l.cols))
        .collect();
    let mut rms: Vec<Layer> = grads.clone();
    let mut curve = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut running = f64::NAN;
    for step in 0..cfg.steps {
        for g in grads.iter_mut() {
            g.w.iter_mut().for_each(|v| *v = 0.0);
            g.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let x0 = data.sample(&mut rng);
            let t = rng.gen_range(1..=schedule.len());
            let ab = schedule.alpha_bar(t);
            let eps: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let xt: Vec<f64> = x0
                .iter()
                .zip(&eps)
                .map(|(&x, &e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
                .collect();
            batch_loss += model.backprop(&xt, t, &eps, &mut grads);
        }
        batch_loss /= cfg.batch as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss = {batch_loss}"
            )));
        }
        if step == 0 {
            initial_loss = batch_loss;
            running = batch_loss;
        }
        running = 0.98 * running + 0.02 * batch_loss;
        if step % 100 == 0 {
            curve.push((step, running));
        }
        // linear decay to 5% of the initial rate settles the last iterate
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.learning_rate * (1.0 - 0.95 * progress);
        let scale = 1.0 / cfg.batch as f64;
        for ((layer, g), r) in model.layers.iter_mut().zip(&grads).zip(rms.iter_mut()) {
            for ((w, gw), rw) in layer
                .w
                .iter_mut()
                .zip(&g.w)
                .zip(r.w.iter_mut())
                .chain(layer.b.iter_mut().zip(&g.b).zip(r.b.iter_mut()))
            {
                let gv = gw * scale;
                *rw = cfg.rms_decay * *rw + (1.0 - cfg.rms_decay) * gv * gv;
                *w -= lr * gv / (rw.sqrt() + 1e-8);
            }
        }
    }
    curve.push((cfg.steps, running));
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss: running,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GaussianData, GaussianDataSpec, GaussianMixture};
    use crate::schedule::make_linear_schedule;
    use approx::assert_relative_eq;

    #[test]
    fn zero_weight_model_outputs_bias() {
        let model = MlpDenoiser::zeroed(2, &[8, 8], 10);
        let out = model.forward(&[3.0, -2.0], 4);
        assert_eq!(out, vec![0.0, 0.0]);
        let out2 = model.forward(&[100.0, 5.0], 9);
        assert_eq!(out2, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = crate::rng::stream_rng(4, 0, crate::rng::STREAM_INIT);
        let model = MlpDenoiser::new(2, &[16, 16], 20, &mut rng);
        let a = model.forward(&[0.3, -0.8], 7);
        let b = model.forward(&[0.3, -0.8], 7);
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream_rng(8, 0, crate::rng::STREAM_INIT);
        let mut model = MlpDenoiser::new(2, &[5, 4], 10, &mut rng);
        let x = [0.4, -0.9];
        let target = [0.2, 0.6];
        let t = 3;
        let mut grads: Vec<Layer> = model
            .layers
            .iter()
            .map(|l| Layer::zeros(l.rows, l.cols))
            .collect();
        model.backprop(&x, t, &target, &mut grads);
        let h = 1e-6;
        for li in 0..model.layers.len() {
            for wi in [0usize, model.layers[li].w.len() - 1] {
                let orig = model.layers[li].w[wi];
                model.layers[li].w[wi] = orig + h;
                let lp = loss_of(&model, &x, t, &target);
                model.layers[li].w[wi] = orig - h;
                let lm = loss_of(&model, &x, t, &target);
                model.layers[li].w[wi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert_relative_eq!(grads[li].w[wi], fd, max_relative = 1e-4, epsilon = 1e-8);
            }
        }
    }

    fn loss_of(model: &MlpDenoiser, x: &[f64], t: usize, target: &[f64]) -> f64 {
        let out = model.forward(x, t);
        out.iter()
            .zip(target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            / target.len() as f64
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let sched = make_linear_schedule(10, 1e-3, 0.05).unwrap();
        let data = GaussianData::new(GaussianDataSpec::unit(1));
        let cfg = TrainConfig {
            steps: 0,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train_mlp(&data, &sched, &[8], &cfg).unwrap();
        let mut rng = crate::rng::stream_rng(2, 0, crate::rng::STREAM_INIT);
        let fresh = MlpDenoiser::new(1, &[8], 10, &mut rng);
        assert_eq!(out.model.forward(&[0.5], 3), fresh.forward(&[0.5], 3));
    }

    #[test]
    fn training_beats_pure_noise_baseline_on_mixture() {
        let sched = make_linear_schedule(20, 5e-3, 0.4).unwrap();
        let data = GaussianMixture::symmetric_pair_1d(2.0, 0.1);
        let cfg = TrainConfig {
            steps: 2000,
            batch: 64,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train_mlp(&data, &sched, &[32, 32], &cfg).unwrap();
        assert!(out.final_loss < 1.0, "loss {} not below baseline", out.final_loss);
        assert!(out.final_loss < out.initial_loss);
    }

    #[test]
    fn trained_model_approaches_analytic_optimum() {
        // unit Gaussian data: the optimum is eps(x, t) = sqrt(1 - abar_t) x
        let sched = make_linear_schedule(20, 5e-3, 0.4).unwrap();
        let data = GaussianData::new(GaussianDataSpec::unit(1));
        let cfg = TrainConfig {
            steps: 15_000,
            batch: 128,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train_mlp(&data, &sched, &[32, 32], &cfg).unwrap();
        let probes = [-1.4, -1.0, -0.7, -0.3, -0.1, 0.2, 0.5, 0.9, 1.1, 1.4];
        for (i, &x) in probes.iter().enumerate() {
            let t = 4 + (i % 13);
            let ab = sched.alpha_bar(t);
            let want = (1.0 - ab).sqrt() * x;
            let got = out.model.forward(&[x], t)[0];
            assert!(
                (got - want).abs() <= (0.1 * want.abs()).max(0.06),
                "probe x={x} t={t}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = crate::rng::stream_rng(6, 0, crate::rng::STREAM_INIT);
        let model = MlpDenoiser::new(2, &[8, 8], 20, &mut rng);
        let text = model.save();
        let loaded = MlpDenoiser::load(&text).unwrap();
        assert_eq!(model.forward(&[0.2, -0.4], 11), loaded.forward(&[0.2, -0.4], 11));
    }

    #[test]
    fn load_rejects_bad_header() {
        assert!(MlpDenoiser::load("not-a-model\n").is_err());
    }
}
