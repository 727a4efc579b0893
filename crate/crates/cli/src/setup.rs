//! Translate a `Config` into concrete schedules, data sources, denoisers
//! and sampler configurations.

use crate::config::Config;
use difflab::data::{DataSampler, GaussianData, GaussianDataSpec, GaussianMixture};
use difflab::denoiser::{
    AnalyticDenoiser, Denoiser, ErrorProfile, NoisyOracleDenoiser, PerturbedAnalyticDenoiser,
};
use difflab::mlp::{MlpDenoiser, MlpEps};
use difflab::sampler::{SamplerConfig, SamplerKind};
use difflab::scaling::ScalingSchedule;
use difflab::schedule::{default_linear_schedule, make_linear_schedule, respace, NoiseSchedule};
use difflab::{Error, Result};

/// Parent schedule plus the respaced grid actually sampled over.
pub fn schedules(cfg: &Config) -> Result<(NoiseSchedule, NoiseSchedule)> {
    let t = cfg.get_usize("schedule.t", 1000)?;
    let t_prime = cfg.get_usize("schedule.t_prime", 20)?;
    let parent = match (cfg.get("schedule.beta_start"), cfg.get("schedule.beta_end")) {
        (None, None) => default_linear_schedule(t)?,
        _ => {
            let bs = cfg.get_f64("schedule.beta_start", 1e-4)?;
            let be = cfg.get_f64("schedule.beta_end", 0.02)?;
            make_linear_schedule(t, bs, be)?
        }
    };
    let effective = respace(&parent, t_prime)?.effective;
    Ok((parent, effective))
}

/// The Gaussian spec behind `data.kind = gaussian`, needed by the analytic
/// denoisers.
pub fn gaussian_spec(cfg: &Config) -> Result<GaussianDataSpec> {
    let dim = cfg.get_usize("data.dim", 1)?;
    let var = cfg.get_f64("data.var", 1.0)?;
    GaussianDataSpec::diagonal(vec![0.0; dim], vec![var; dim])
}

pub fn data(cfg: &Config) -> Result<Box<dyn DataSampler>> {
    let dim = cfg.get_usize("data.dim", 1)?;
    match cfg.get_str("data.kind", "gaussian").as_str() {
        "gaussian" => Ok(Box::new(GaussianData::new(gaussian_spec(cfg)?))),
        "mixture" => {
            let offset = cfg.get_f64("data.offset", 2.0)?;
            let sigma = cfg.get_f64("data.sigma", 0.1)?;
            Ok(match dim {
                1 => Box::new(GaussianMixture::symmetric_pair_1d(offset, sigma)),
                2 => Box::new(GaussianMixture::symmetric_pair_2d(offset, sigma)),
                d => {
                    return Err(Error::InvalidArgument(format!(
                        "mixture data supports dim 1 or 2, got {d}"
                    )))
                }
            })
        }
        other => Err(Error::Parse(format!("unknown data.kind {other:?}"))),
    }
}

pub fn error_profile(cfg: &Config) -> Result<ErrorProfile> {
    let e = cfg.get_f64("denoiser.error", 0.1)?;
    match cfg.get_str("denoiser.profile", "constant").as_str() {
        "constant" => Ok(ErrorProfile::Constant(e)),
        "proportional" => Ok(ErrorProfile::Proportional(e)),
        other => Err(Error::Parse(format!("unknown denoiser.profile {other:?}"))),
    }
}

/// Build the configured denoiser over `effective`.
///
/// `for_generation` swaps the anchored noisy oracle for its perturbed
/// analytic counterpart, which can run chains that start from pure noise.
pub fn denoiser(
    cfg: &Config,
    effective: &NoiseSchedule,
    for_generation: bool,
) -> Result<Box<dyn Denoiser>> {
    let dim = cfg.get_usize("data.dim", 1)?;
    let kind = cfg.get_str("denoiser.kind", "noisy-oracle");
    match kind.as_str() {
        "noisy-oracle" if !for_generation => Ok(Box::new(NoisyOracleDenoiser::new(
            dim,
            error_profile(cfg)?,
            effective,
        ))),
        "noisy-oracle" | "perturbed" => Ok(Box::new(PerturbedAnalyticDenoiser::new(
            &gaussian_spec(cfg)?,
            effective,
            error_profile(cfg)?,
        ))),
        "analytic" => Ok(Box::new(AnalyticDenoiser::new(
            &gaussian_spec(cfg)?,
            effective,
        ))),
        "mlp" => {
            let path = cfg
                .get("denoiser.weights")
                .ok_or_else(|| Error::InvalidArgument("denoiser.weights is required".into()))?;
            let text = std::fs::read_to_string(path)?;
            let model = MlpDenoiser::load(&text)?;
            Ok(Box::new(MlpEps::new(model, effective)))
        }
        other => Err(Error::Parse(format!("unknown denoiser.kind {other:?}"))),
    }
}

pub fn scaling(cfg: &Config, t_prime: usize) -> Result<Option<ScalingSchedule>> {
    let spec = cfg.get_str("sampler.lambda", "none");
    parse_scaling(&spec, t_prime)
}

pub fn parse_scaling(spec: &str, t_prime: usize) -> Result<Option<ScalingSchedule>> {
    if spec == "none" {
        return Ok(None);
    }
    if let Some(b) = spec.strip_prefix("uniform:") {
        let b: f64 = b
            .parse()
            .map_err(|e| Error::Parse(format!("lambda: {e}")))?;
        return Ok(Some(ScalingSchedule::uniform(b, t_prime)?));
    }
    if let Some(kb) = spec.strip_prefix("linear:") {
        let (k, b) = kb
            .split_once(',')
            .ok_or_else(|| Error::Parse("lambda: expected linear:k,b".into()))?;
        let k: f64 = k
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("lambda k: {e}")))?;
        let b: f64 = b
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("lambda b: {e}")))?;
        return Ok(Some(ScalingSchedule::linear(k, b, t_prime)?));
    }
    Err(Error::Parse(format!(
        "unknown lambda form {spec:?}; use none, uniform:B or linear:K,B"
    )))
}

pub fn sampler_config(cfg: &Config, effective: &NoiseSchedule, seed: u64) -> Result<SamplerConfig> {
    let kind = match cfg.get_str("sampler.kind", "ddpm").as_str() {
        "ddpm" => SamplerKind::Ddpm,
        "ddim" => SamplerKind::Ddim {
            eta: cfg.get_f64("sampler.eta", 0.0)?,
        },
        "euler" => SamplerKind::Euler,
        "heun" => SamplerKind::Heun,
        other => return Err(Error::Parse(format!("unknown sampler.kind {other:?}"))),
    };
    SamplerConfig::new(kind, effective.clone(), seed)?
        .with_scaling(scaling(cfg, effective.len())?)
}
