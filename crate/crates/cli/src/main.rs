//! Command-line front end: wires configs to runs and emits CSV/SVG
//! artifacts.
//!
//! Exit codes: 0 on success, 1 when a verification check fails, 2 on
//! usage or configuration errors.

mod config;
mod setup;

use clap::{Parser, Subcommand};
use config::Config;
use difflab::diagnostics::{
    frechet_gaussian, measure_delta_t, measure_eps_norms, measure_single_step_error,
    measure_two_step_error, terminal_moments, BiasReport,
};
use difflab::report::{svg_plot, with_config_header, Series};
use difflab::sampler::{chains_to_csv, run_chain, ChainInit, ChainRecord, SamplerConfig};
use difflab::scaling::{forward_accumulate, invert_norm_ratio, NormRatioSeries, ScalingForm};
use difflab::theory::{ddim_single_step_var, ddpm_single_step_var, ddpm_two_step_var, StepKind};
use difflab::{Error, Result};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "difflab", version, about = "Diffusion sampling laboratory")]
struct Cli {
    /// Configuration file (flat key=value with [section] headers)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override run.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (never affects results, only wall time)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte Carlo vs closed-form variance oracles (exit 1 on mismatch)
    VerifyTheory,
    /// Generate chains and dump trajectories
    Sample,
    /// Anchored exposure-bias measurements (delta_t and variance errors)
    Bias,
    /// Training-vs-sampling epsilon-norm curves and DeltaN(t) inversion
    Norms,
    /// Uniform-b scaling sweep: delta_1 and terminal Frechet distance
    Sweep,
    /// Train the small MLP denoiser and save its weights
    Train,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("run.seed", seed);
    }
    Ok(cfg)
}

fn header_entries(cfg: &Config, command: &str) -> Vec<(String, String)> {
    let mut entries = vec![("command".to_string(), command.to_string())];
    entries.extend(cfg.entries());
    entries
}

fn write_artifact(
    out_dir: &Path,
    name: &str,
    cfg: &Config,
    command: &str,
    body: &str,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let entries = header_entries(cfg, command);
    let refs: Vec<(&str, String)> = entries
        .iter()
        .map(|(k, v)| (k.as_str(), v.clone()))
        .collect();
    std::fs::write(out_dir.join(name), with_config_header(&refs, body))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        // ignore the error if a pool already exists (tests call run() twice)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::VerifyTheory => cmd_verify_theory(&cli, &cfg),
        Cmd::Sample => cmd_sample(&cli, &cfg),
        Cmd::Bias => cmd_bias(&cli, &cfg),
        Cmd::Norms => cmd_norms(&cli, &cfg),
        Cmd::Sweep => cmd_sweep(&cli, &cfg),
        Cmd::Train => cmd_train(&cli, &cfg),
    }
}

fn cmd_verify_theory(cli: &Cli, cfg: &Config) -> Result<ExitCode> {
    let (_, eff) = setup::schedules(cfg)?;
    let tp = eff.len();
    let seed = cfg.get_u64("run.seed", 0)?;
    let n = cfg.get_u64("run.n", 200_000)?;
    let e = cfg.get_f64("denoiser.error", 0.1)?;
    let e_two = cfg.get_f64("run.two_step_error", 0.05)?;
    let tol = cfg.get_f64("run.tolerance", 0.02)?;
    let tol_two = cfg.get_f64("run.two_step_tolerance", 0.05)?;
    let data = setup::data(cfg)?;
    let oracle = |e: f64| {
        difflab::denoiser::NoisyOracleDenoiser::new(
            data.dim(),
            difflab::denoiser::ErrorProfile::Constant(e),
            &eff,
        )
    };

    let mut body = String::from("check,t,predicted,measured,se,pass\n");
    let mut all_pass = true;
    let mut record = |check: &str, t: usize, predicted: f64, measured: f64, se: f64, tol: f64| {
        let pass = if tol == 0.0 {
            measured == predicted
        } else {
            (measured - predicted).abs() <= (tol * predicted).max(3.0 * se)
        };
        all_pass &= pass;
        let _ = writeln!(
            body,
            "{check},{t},{predicted:.17e},{measured:.17e},{se:.17e},{}",
            if pass { "pass" } else { "fail" }
        );
    };

    let den = oracle(e);
    let rep = measure_single_step_error(&den, &eff, data.as_ref(), StepKind::Ddpm, n, seed)?;
    for t in 0..tp {
        let row = rep.row(t).unwrap();
        let pred = ddpm_single_step_var(&eff, t, e)?;
        record("ddpm_single", t, pred.sampled_var, row.measured_var, row.measured_var_se, tol);
    }
    let rep = measure_single_step_error(
        &den,
        &eff,
        data.as_ref(),
        StepKind::Ddim { eta: 0.0 },
        n,
        seed.wrapping_add(1),
    )?;
    for t in 0..tp {
        let row = rep.row(t).unwrap();
        let pred = ddim_single_step_var(&eff, t, e)?;
        record("ddim_single", t, pred.sampled_var, row.measured_var, row.measured_var_se, tol);
    }
    let den2 = oracle(e_two);
    let rep = measure_two_step_error(&den2, &eff, data.as_ref(), n, seed.wrapping_add(2))?;
    for t in 1..tp - 1 {
        let row = rep.row(t).unwrap();
        let pred = ddpm_two_step_var(&eff, t + 1, e_two)?;
        record("ddpm_two", t, pred.sampled_var, row.measured_var, row.measured_var_se, tol_two);
    }
    let den0 = oracle(0.0);
    let rep = measure_single_step_error(
        &den0,
        &eff,
        data.as_ref(),
        StepKind::Ddpm,
        n.min(50_000),
        seed.wrapping_add(3),
    )?;
    for row in &rep.rows {
        let pass = row.single_err.abs() <= 3.0 * row.measured_var_se + 1e-28;
        all_pass &= pass;
        let _ = writeln!(
            body,
            "zero_error,{},{:.17e},{:.17e},{:.17e},{}",
            row.t,
            row.train_var,
            row.measured_var,
            row.measured_var_se,
            if pass { "pass" } else { "fail" }
        );
    }

    write_artifact(&cli.out, "verify_theory.csv", cfg, "verify-theory", &body)?;
    println!(
        "verify-theory: {} (see {})",
        if all_pass { "all checks passed" } else { "CHECK FAILED" },
        cli.out.join("verify_theory.csv").display()
    );
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn generate_chains(
    sc: &SamplerConfig,
    denoiser: &dyn difflab::denoiser::Denoiser,
    n: u64,
) -> Result<Vec<ChainRecord>> {
    (0..n)
        .into_par_iter()
        .map(|chain_id| run_chain(sc, denoiser, &ChainInit::FromNoise, chain_id))
        .collect()
}

fn cmd_sample(cli: &Cli, cfg: &Config) -> Result<ExitCode> {
    let (_, eff) = setup::schedules(cfg)?;
    let seed = cfg.get_u64("run.seed", 0)?;
    let n = cfg.get_u64("run.n", 100)?;
    let anchored = cfg.get_str("run.anchored", "false") == "true";
    let sc = setup::sampler_config(cfg, &eff, seed)?;
    let den = setup::denoiser(cfg, &eff, !anchored)?;
    let data = setup::data(cfg)?;
    let records: Result<Vec<ChainRecord>> = (0..n)
        .into_par_iter()
        .map(|chain_id| {
            let init = if anchored {
                let mut rng = difflab::rng::stream_rng(seed, chain_id, difflab::rng::STREAM_DATA);
                ChainInit::Anchored(data.sample(&mut rng))
            } else {
                ChainInit::FromNoise
            };
            run_chain(&sc, den.as_ref(), &init, chain_id)
        })
        .collect();
    let records = records?;
    let body = chains_to_csv(&records, den.dim());
    write_artifact(&cli.out, "chains.csv", cfg, "sample", &body)?;
    println!(
        "sample: wrote {} chains to {}",
        records.len(),
        cli.out.join("chains.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn bias_svg(report: &BiasReport) -> String {
    let delta: Vec<(f64, f64)> = report
        .rows
        .iter()
        .map(|r| (r.t as f64, r.delta))
        .collect();
    let multi: Vec<(f64, f64)> = report
        .rows
        .iter()
        .map(|r| (r.t as f64, r.multi_err))
        .collect();
    svg_plot(
        "exposure bias per timestep",
        "t",
        "variance gap",
        &[
            Series { name: "delta_t", points: &delta },
            Series { name: "multi_err", points: &multi },
        ],
    )
}

fn cmd_bias(cli: &Cli, cfg: &Config) -> Result<ExitCode> {
    let (_, eff) = setup::schedules(cfg)?;
    let seed = cfg.get_u64("run.seed", 0)?;
    let n = cfg.get_u64("run.n", 50_000)?;
    let sc = setup::sampler_config(cfg, &eff, seed)?;
    let den = setup::denoiser(cfg, &eff, false)?;
    let data = setup::data(cfg)?;
    let multi = measure_delta_t(den.as_ref(), &sc, data.as_ref(), n)?;
    let single = measure_single_step_error(
        den.as_ref(),
        &eff,
        data.as_ref(),
        StepKind::Ddpm,
        n,
        seed.wrapping_add(1),
    )?;
    write_artifact(&cli.out, "bias_multi.csv", cfg, "bias", &multi.to_csv())?;
    write_artifact(&cli.out, "bias_single.csv", cfg, "bias", &single.to_csv())?;
    write_artifact(&cli.out, "bias_delta.svg", cfg, "bias", &bias_svg(&multi))?;
    let d1 = multi.row(1).map(|r| r.delta).unwrap_or(f64::NAN);
    println!(
        "bias: delta_1 = {d1:.6e} over {n} chains ({})",
        cli.out.join("bias_multi.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_norms(cli: &Cli, cfg: &Config) -> Result<ExitCode> {
    let (_, eff) = setup::schedules(cfg)?;
    let seed = cfg.get_u64("run.seed", 0)?;
    let n = cfg.get_u64("run.n", 20_000)?;
    let t_min = cfg.get_usize("run.t_min", difflab::scaling::DEFAULT_T_MIN)?;
    let sc = setup::sampler_config(cfg, &eff, seed)?;
    let den = setup::denoiser(cfg, &eff, false)?;
    let data = setup::data(cfg)?;
    let rep = measure_eps_norms(den.as_ref(), &sc, data.as_ref(), n)?;
    write_artifact(&cli.out, "norms.csv", cfg, "norms", &rep.to_csv())?;
    let train: Vec<(f64, f64)> = rep
        .rows
        .iter()
        .map(|r| (r.t as f64, r.eps_norm_train))
        .collect();
    let sample: Vec<(f64, f64)> = rep
        .rows
        .iter()
        .map(|r| (r.t as f64, r.eps_norm_sample))
        .collect();
    let svg = svg_plot(
        "epsilon norms: training vs sampling",
        "t",
        "mean L2 norm",
        &[
            Series { name: "training", points: &train },
            Series { name: "sampling", points: &sample },
        ],
    );
    write_artifact(&cli.out, "norms.svg", cfg, "norms", &svg)?;
    let series = NormRatioSeries::new(
        rep.rows
            .iter()
            .map(|r| (r.t, r.norm_ratio, r.n))
            .collect(),
    )?;
    write_artifact(&cli.out, "norm_ratio.csv", cfg, "norms", &series.to_csv())?;
    match invert_norm_ratio(&series, t_min) {
        Ok(fit) => {
            let desc = match fit.form {
                ScalingForm::Uniform { b } => format!("uniform b = {b:.6}"),
                ScalingForm::Linear { k, b } => format!("linear k = {k:.6}, b = {b:.6}"),
            };
            println!("norms: fitted lambda(t): {desc}");
            let round_trip = forward_accumulate(&fit, n);
            write_artifact(
                &cli.out,
                "norm_ratio_fit.csv",
                cfg,
                "norms",
                &round_trip.to_csv(),
            )?;
        }
        Err(e) => println!("norms: lambda fit unavailable ({e})"),
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep_grid(cfg: &Config) -> Result<Vec<f64>> {
    if let Some(list) = cfg.get("sweep.grid") {
        let grid: std::result::Result<Vec<f64>, _> =
            list.split(',').map(|v| v.trim().parse()).collect();
        let grid = grid.map_err(|e| Error::Parse(format!("sweep.grid: {e}")))?;
        if grid.is_empty() {
            return Err(Error::InvalidArgument("sweep.grid is empty".into()));
        }
        return Ok(grid);
    }
    let lo = cfg.get_f64("sweep.b_min", 1.0)?;
    let hi = cfg.get_f64("sweep.b_max", 1.05)?;
    let step = cfg.get_f64("sweep.b_step", 0.005)?;
    if step <= 0.0 || hi < lo {
        return Err(Error::InvalidArgument("bad sweep range".into()));
    }
    let count = ((hi - lo) / step).round() as usize + 1;
    Ok((0..count).map(|i| lo + step * i as f64).collect())
}

fn cmd_sweep(cli: &Cli, cfg: &Config) -> Result<ExitCode> {
    let (_, eff) = setup::schedules(cfg)?;
    let seed = cfg.get_u64("run.seed", 0)?;
    let n_bias = cfg.get_u64("run.n", 50_000)?;
    let n_gen = cfg.get_u64("sweep.n_gen", 20_000)?;
    let grid = sweep_grid(cfg)?;
    let den_bias = setup::denoiser(cfg, &eff, false)?;
    let den_gen = setup::denoiser(cfg, &eff, true)?;
    let data = setup::data(cfg)?;
    let (ref_mean, ref_cov) = data.moments();

    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for &b in &grid {
        let scaling = if b == 1.0 {
            None
        } else {
            Some(difflab::scaling::ScalingSchedule::uniform(b, eff.len())?)
        };
        let sc = setup::sampler_config(cfg, &eff, seed)?.with_scaling(scaling)?;
        let rep = measure_delta_t(den_bias.as_ref(), &sc, data.as_ref(), n_bias)?;
        let d1 = rep.row(1).map(|r| r.delta).unwrap_or(f64::NAN);
        let records = generate_chains(&sc, den_gen.as_ref(), n_gen)?;
        let (mean, cov) = terminal_moments(&records, data.dim());
        let fd = frechet_gaussian(&mean, &cov, &ref_mean, &ref_cov)?;
        println!("sweep: b = {b:.4}  delta_1 = {d1:.6e}  frechet = {fd:.6e}");
        rows.push((b, d1, fd));
    }
    let argmin_d = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i);
    let argmin_f = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .2.total_cmp(&b.1 .2))
        .map(|(i, _)| i);
    let mut body = String::from("b,delta_1,frechet,argmin_delta,argmin_frechet\n");
    for (i, (b, d, f)) in rows.iter().enumerate() {
        let _ = writeln!(
            body,
            "{b:.6},{d:.17e},{f:.17e},{},{}",
            (Some(i) == argmin_d) as u8,
            (Some(i) == argmin_f) as u8
        );
    }
    write_artifact(&cli.out, "sweep.csv", cfg, "sweep", &body)?;
    if let Some(i) = argmin_d {
        println!("sweep: argmin delta_1 at b = {:.4}", rows[i].0);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cli: &Cli, cfg: &Config) -> Result<ExitCode> {
    let (_, eff) = setup::schedules(cfg)?;
    let seed = cfg.get_u64("run.seed", 0)?;
    let data = setup::data(cfg)?;
    let hidden: std::result::Result<Vec<usize>, _> = cfg
        .get_str("train.hidden", "64,64,64")
        .split(',')
        .map(|v| v.trim().parse())
        .collect();
    let hidden = hidden.map_err(|e| Error::Parse(format!("train.hidden: {e}")))?;
    let tc = difflab::mlp::TrainConfig {
        steps: cfg.get_usize("train.steps", 20_000)?,
        batch: cfg.get_usize("train.batch", 256)?,
        learning_rate: cfg.get_f64("train.learning_rate", 1e-3)?,
        rms_decay: cfg.get_f64("train.rms_decay", 0.999)?,
        seed,
    };
    let out = difflab::mlp::train_mlp(data.as_ref(), &eff, &hidden, &tc)?;
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("mlp_weights.csv"), out.model.save())?;
    let mut curve = String::from("step,loss\n");
    for (step, loss) in &out.loss_curve {
        let _ = writeln!(curve, "{step},{loss:.17e}");
    }
    write_artifact(&cli.out, "train_loss.csv", cfg, "train", &curve)?;
    println!(
        "train: final loss {:.6} (initial {:.6}); weights at {}",
        out.final_loss,
        out.initial_loss,
        cli.out.join("mlp_weights.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}
