//! Command-line driver: wires simulation, estimation, certification,
//! forecasting, and event ingestion into reproducible pipelines. Every
//! subcommand is deterministic given its flags (all randomness flows from
//! `--seed`), so reruns produce byte-identical outputs.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gglm_core::certify::{
    advanced_with_rates, basic_with_rates, report_from_suite, step_rates, CertificateSuite,
    CertificationReport, CertifyConfig,
};
use gglm_core::estimator::{
    fit_least_squares, fit_vi_extragradient, FitConfig, FitResult, Weights,
};
use gglm_core::io::{
    ingest_events, read_trajectory_csv, train_test_split, write_trajectory_csv, GridSpec,
    IngestOptions, ModelFile,
};
use gglm_core::predict::{
    evaluate_metrics, forecast_intervals, noncoverage_table, ForecastTable, MetricsReport,
    NoncoverageTable,
};
use gglm_core::simulate::{generate_params, simulate_categorical, simulate_poisson, GenSpec};
use gglm_core::{FeasibleSet, LinkFunction, ModelShape, ParamVector, Trajectory};
use rayon::prelude::*;
use serde_json::{json, Value};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "gglm",
    version,
    about = "Self-exciting count models: simulation, estimation, certified confidence bounds, forecasting",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw model parameters and sample a trajectory from them.
    Simulate(SimulateArgs),
    /// Estimate parameters from a trajectory CSV.
    Fit(FitArgs),
    /// Build the certificate suite and extract per-coordinate confidence
    /// intervals (identity link).
    Certify(CertifyArgs),
    /// Forecast intensities and central Poisson intervals from one origin.
    Predict(PredictArgs),
    /// Score one-step forecasts against a held-out window and tabulate
    /// rolling interval noncoverage.
    Evaluate(EvaluateArgs),
    /// Bin an event table (timestamp,lat,lon) onto a spatial grid.
    Ingest(IngestArgs),
    /// Run a canned end-to-end pipeline (simulate, fit, certify, predict).
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkArg {
    Identity,
    Sigmoid,
    Exp,
}

impl From<LinkArg> for LinkFunction {
    fn from(v: LinkArg) -> Self {
        match v {
            LinkArg::Identity => LinkFunction::Identity,
            LinkArg::Sigmoid => LinkFunction::Sigmoid,
            LinkArg::Exp => LinkFunction::Exp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    /// Conditionally Poisson counts.
    Poisson,
    /// One-hot categorical marks per location.
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    /// Critical regime (b = 1): explosive counts, unidentifiable birth rates.
    A,
    /// Subcritical regime (b = 0.5): stationary counts, full recovery.
    B,
}

/// Process dimensions shared by most subcommands.
#[derive(Args, Debug, Clone, Copy)]
pub struct ShapeArgs {
    /// Number of locations.
    #[arg(long = "L", default_value_t = 5)]
    pub l: usize,
    /// Memory depth (number of lags).
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    /// Marks per location (1 for plain counts).
    #[arg(long, default_value_t = 1)]
    pub mu: usize,
}

impl ShapeArgs {
    pub fn shape(&self) -> Result<ModelShape> {
        Ok(ModelShape::new(self.l, self.d, self.mu)?)
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Birth rate: every base coordinate is exactly `a`.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Total excitation weight per channel (row sum of the lag block).
    #[arg(long, default_value_t = 0.5)]
    pub b: f64,
    /// Number of steps to sample.
    #[arg(long = "N", default_value_t = 10_000)]
    pub n: usize,
    /// Master seed; parameters and the trajectory use split substreams.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    pub link: LinkArg,
    #[arg(long, value_enum, default_value_t = KindArg::Poisson)]
    pub kind: KindArg,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Trajectory CSV to estimate from.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Birth-rate cap of the feasible box.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Excitation row-sum cap of the feasible box.
    #[arg(long, default_value_t = 0.5)]
    pub b: f64,
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    pub link: LinkArg,
    /// Stationarity tolerance (sup-norm of the projected step).
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 50_000)]
    pub max_iters: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    /// Trajectory CSV to certify against.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Birth-rate cap of the feasible box.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Excitation row-sum cap of the feasible box.
    #[arg(long, default_value_t = 0.5)]
    pub b: f64,
    /// Total miscoverage budget of the suite.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Comma-separated scale grid for the online bound (default: a log grid
    /// 1e-4..=1e5, quarter-decade spacing).
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    /// Comma-separated step budgets for the advanced policies.
    #[arg(long, value_delimiter = ',')]
    pub theta_grid: Option<Vec<f64>>,
    /// Fitted model JSON; fits in place when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Ground-truth model JSON; adds actual-error columns when given.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Worker threads for the policy sweep (0 = all available cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Fitted model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Trajectory CSV supplying the forecast context.
    #[arg(long)]
    pub input: PathBuf,
    /// Forecast origin (step index); defaults to the last step.
    #[arg(long)]
    pub origin: Option<usize>,
    /// Largest forecast horizon.
    #[arg(long, default_value_t = 5)]
    pub p_max: usize,
    /// Central interval coverage level.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Fitted model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Trajectory CSV covering both the training and the test window.
    #[arg(long)]
    pub input: PathBuf,
    /// Steps in the training window; the rest is scored.
    #[arg(long)]
    pub n_train: usize,
    /// Largest noncoverage horizon.
    #[arg(long, default_value_t = 5)]
    pub p_max: usize,
    /// Central interval coverage level.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Season length for the seasonal baseline (1 = global mean).
    #[arg(long, default_value_t = 1)]
    pub period: usize,
    /// Simulated-forecast replicas per test step.
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Seed for the simulated-forecast replicas.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Events CSV with header `timestamp,lat,lon`.
    #[arg(long)]
    pub input: PathBuf,
    /// Grid JSON: cell rectangles, time-bin rule, origin.
    #[arg(long)]
    pub grid: PathBuf,
    /// Memory depth of the produced trajectory (zero history prefix).
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    /// Number of time bins to keep; defaults to one past the latest event.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Fail on the first malformed row instead of skipping and counting it.
    #[arg(long, default_value_t = false)]
    pub strict: bool,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Which canned pipeline to run.
    #[arg(value_enum, ignore_case = true)]
    pub variant: Variant,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Generator birth rate; estimation searches a 10%-inflated cap.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Generator excitation row sum (estimation cap inflated likewise);
    /// defaults to 1.0 for variant A and 0.5 for variant B.
    #[arg(long)]
    pub b: Option<f64>,
    /// Training steps.
    #[arg(long = "N", default_value_t = 100_000)]
    pub n: usize,
    /// Held-out steps scored by the forecast stage.
    #[arg(long, default_value_t = 2_000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Total miscoverage budget of the certificate suite.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Comma-separated scale grid for the online bound.
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    /// Comma-separated step budgets for the advanced policies.
    #[arg(long, value_delimiter = ',')]
    pub theta_grid: Option<Vec<f64>>,
    /// Central interval coverage level for the forecast stage.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Largest forecast horizon.
    #[arg(long, default_value_t = 5)]
    pub p_max: usize,
    /// Worker threads for the policy sweep (0 = all available cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

/// Dispatch a parsed command; the returned JSON summary goes to stdout.
pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Certify(a) => run_certify(a),
        Command::Predict(a) => run_predict(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Ingest(a) => run_ingest(a),
        Command::Experiment(a) => run_experiment(a),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating output directory {}", path.display()))
}

fn feasible_box(a: f64, b: f64) -> FeasibleSet {
    FeasibleSet::BoxRowSum { a_cap: a, b_cap: b }
}

fn load_params(path: &Path, shape: ModelShape) -> Result<(ParamVector, ModelFile)> {
    let file =
        ModelFile::load(path).with_context(|| format!("loading model {}", path.display()))?;
    if file.shape != shape {
        bail!(
            "model {} has shape (L={}, d={}, mu={}), expected (L={}, d={}, mu={})",
            path.display(),
            file.shape.locations(),
            file.shape.memory(),
            file.shape.marks(),
            shape.locations(),
            shape.memory(),
            shape.marks()
        );
    }
    let beta = ParamVector::from_flat(shape, file.beta.clone())?;
    Ok((beta, file))
}

fn read_traj(path: &Path, shape: ModelShape) -> Result<Trajectory> {
    read_trajectory_csv(path, shape)
        .with_context(|| format!("reading trajectory {}", path.display()))
}

pub fn run_simulate(args: SimulateArgs) -> Result<Value> {
    let shape = args.shape.shape()?;
    ensure_dir(&args.out)?;
    let spec = GenSpec {
        shape,
        a: args.a,
        b: args.b,
        seed: args.seed,
    };
    let beta = generate_params(&spec)?;
    let link = LinkFunction::from(args.link);
    let traj = match args.kind {
        KindArg::Poisson => simulate_poisson(&beta, link, args.n, args.seed, None)?,
        KindArg::Categorical => simulate_categorical(&beta, link, args.n, args.seed, None)?,
    };
    let traj_path = args.out.join("trajectory.csv");
    write_trajectory_csv(&traj_path, &traj)?;
    let truth = ModelFile::new(
        shape,
        link,
        feasible_box(args.a, args.b),
        beta.as_flat().to_vec(),
    );
    truth.save(&args.out.join("truth.json"))?;
    let total: f64 = traj
        .states()
        .iter()
        .skip(shape.memory())
        .map(|s| s.iter().sum::<f64>())
        .sum();
    let summary = json!({
        "command": "simulate",
        "locations": shape.locations(),
        "memory": shape.memory(),
        "marks": shape.marks(),
        "steps": traj.num_steps(),
        "total_events": total,
        "mean_count_per_channel": total / (traj.num_steps() as f64 * shape.state_dim() as f64),
        "files": ["trajectory.csv", "truth.json"],
    });
    save_summary(&args.out, &summary)?;
    Ok(summary)
}

fn fit_config(tol: f64, max_iters: usize) -> FitConfig {
    FitConfig {
        tol,
        max_iters,
        ..FitConfig::default()
    }
}

fn fit_trajectory(
    traj: &Trajectory,
    link: LinkFunction,
    feasible: &FeasibleSet,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let fit = if link == LinkFunction::Identity {
        fit_least_squares(traj, feasible, cfg)?
    } else {
        fit_vi_extragradient(traj, link, feasible, cfg)?
    };
    Ok(fit)
}

pub fn run_fit(args: FitArgs) -> Result<Value> {
    let shape = args.shape.shape()?;
    ensure_dir(&args.out)?;
    let traj = read_traj(&args.input, shape)?;
    let link = LinkFunction::from(args.link);
    let feasible = feasible_box(args.a, args.b);
    let fit = fit_trajectory(&traj, link, &feasible, &fit_config(args.tol, args.max_iters))?;
    let model = ModelFile::new(shape, link, feasible, fit.beta_hat.as_flat().to_vec());
    model.save(&args.out.join("model.json"))?;
    let summary = json!({
        "command": "fit",
        "steps": traj.num_steps(),
        "kappa": shape.kappa(),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "residual": fit.residual,
        "objective": fit.objective,
        "files": ["model.json"],
    });
    save_summary(&args.out, &summary)?;
    Ok(summary)
}

fn certify_config(
    epsilon: f64,
    alpha_grid: Option<Vec<f64>>,
    theta_grid: Option<Vec<f64>>,
) -> CertifyConfig {
    let mut cfg = CertifyConfig {
        epsilon,
        ..CertifyConfig::default()
    };
    if let Some(grid) = alpha_grid {
        cfg.alpha_grid = grid;
    }
    if let Some(grid) = theta_grid {
        cfg.theta_grid = grid;
    }
    cfg
}

/// Build the certificate suite with the advanced-policy sweep spread over a
/// worker pool. Policies are independent given the shared step rates and
/// union budget, and the ordered collect keeps the suite identical to the
/// sequential construction for any thread count.
pub fn build_suite(
    traj: &Trajectory,
    link: LinkFunction,
    weights: &Weights,
    feasible: &FeasibleSet,
    cfg: &CertifyConfig,
    threads: usize,
) -> Result<CertificateSuite> {
    if link != LinkFunction::Identity {
        bail!("certification requires the identity link");
    }
    let shape = *traj.shape();
    let kappa = shape.kappa();
    let bc = cfg.bound_config(cfg.suite_size(kappa));
    let rates = step_rates(traj, link, feasible)?;
    let mut certificates = basic_with_rates(traj, weights, &rates, &bc)?;
    let pairs: Vec<(usize, f64)> = (0..kappa)
        .flat_map(|t| cfg.theta_grid.iter().map(move |&th| (t, th)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building worker pool")?;
    let advanced = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(target, theta)| {
                advanced_with_rates(traj, weights, target, theta, &rates, &bc)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    certificates.extend(advanced);
    Ok(CertificateSuite {
        shape,
        feasible: *feasible,
        epsilon: cfg.epsilon,
        union_count: bc.union_count,
        certificates,
    })
}

pub fn run_certify(args: CertifyArgs) -> Result<Value> {
    let shape = args.shape.shape()?;
    ensure_dir(&args.out)?;
    let traj = read_traj(&args.input, shape)?;
    let feasible = feasible_box(args.a, args.b);
    let mut files = vec!["bounds.json", "recovery_summary.csv", "sorted_errors.csv"];
    let beta_hat = match &args.model {
        Some(path) => load_params(path, shape)?.0,
        None => {
            let fit = fit_trajectory(
                &traj,
                LinkFunction::Identity,
                &feasible,
                &FitConfig::default(),
            )?;
            let model = ModelFile::new(
                shape,
                LinkFunction::Identity,
                feasible,
                fit.beta_hat.as_flat().to_vec(),
            );
            model.save(&args.out.join("model.json"))?;
            files.push("model.json");
            fit.beta_hat
        }
    };
    let truth = match &args.truth {
        Some(path) => Some(load_params(path, shape)?.0),
        None => None,
    };
    let cfg = certify_config(args.epsilon, args.alpha_grid, args.theta_grid);
    let suite = build_suite(
        &traj,
        LinkFunction::Identity,
        &Weights::Uniform,
        &feasible,
        &cfg,
        args.threads,
    )?;
    let report = report_from_suite(&suite, &beta_hat, truth.as_ref())?;
    gglm_core::io::save_json(&args.out.join("bounds.json"), &report)?;
    write_recovery_summary(&args.out.join("recovery_summary.csv"), &report, shape.state_dim())?;
    write_sorted_errors(&args.out.join("sorted_errors.csv"), &report)?;
    let summary = certify_summary("certify", &report, &files);
    save_summary(&args.out, &summary)?;
    Ok(summary)
}

pub fn run_predict(args: PredictArgs) -> Result<Value> {
    ensure_dir(&args.out)?;
    let file = ModelFile::load(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let beta = ParamVector::from_flat(file.shape, file.beta.clone())?;
    let traj = read_traj(&args.input, file.shape)?;
    let origin = args.origin.unwrap_or_else(|| traj.num_steps());
    let table = forecast_intervals(&beta, file.link, &traj, origin, args.p_max, args.level)?;
    write_intervals_csv(&args.out.join("intervals.csv"), &table)?;
    let summary = json!({
        "command": "predict",
        "origin": origin,
        "horizons": args.p_max,
        "level": args.level,
        "channels": file.shape.state_dim(),
        "files": ["intervals.csv"],
    });
    save_summary(&args.out, &summary)?;
    Ok(summary)
}

pub fn run_evaluate(args: EvaluateArgs) -> Result<Value> {
    ensure_dir(&args.out)?;
    let file = ModelFile::load(&args.model)
        .with_context(|| format!("loading model {}", args.model.display()))?;
    let beta = ParamVector::from_flat(file.shape, file.beta.clone())?;
    let traj = read_traj(&args.input, file.shape)?;
    let metrics = evaluate_metrics(
        &traj,
        args.n_train,
        &beta,
        file.link,
        args.reps,
        args.period,
        args.seed,
    )?;
    let (_, test) = train_test_split(&traj, args.n_train)?;
    let table = noncoverage_table(&beta, file.link, &test, args.p_max, args.level)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &metrics, args.n_train)?;
    write_noncoverage_csv(&args.out.join("noncoverage.csv"), &table)?;
    let summary = json!({
        "command": "evaluate",
        "test_steps": metrics.test_steps,
        "replicas": metrics.replicas,
        "mae_predicted": metrics.mae_predicted,
        "mae_simulated": metrics.mae_simulated,
        "mae_seasonal": metrics.mae_seasonal,
        "noncoverage_mean_by_p": mean_by_p(&table),
        "level": args.level,
        "files": ["metrics.csv", "noncoverage.csv"],
    });
    save_summary(&args.out, &summary)?;
    Ok(summary)
}

pub fn run_ingest(args: IngestArgs) -> Result<Value> {
    ensure_dir(&args.out)?;
    let grid =
        GridSpec::load(&args.grid).with_context(|| format!("loading grid {}", args.grid.display()))?;
    let opts = IngestOptions {
        strict: args.strict,
        horizon: args.horizon,
    };
    let (traj, report) = ingest_events(&args.input, &grid, args.d, &opts)
        .with_context(|| format!("ingesting {}", args.input.display()))?;
    write_trajectory_csv(&args.out.join("trajectory.csv"), &traj)?;
    gglm_core::io::save_json(&args.out.join("ingest_report.json"), &report)?;
    let summary = json!({
        "command": "ingest",
        "locations": grid.locations(),
        "steps": traj.num_steps(),
        "report": report,
        "files": ["trajectory.csv", "ingest_report.json"],
    });
    save_summary(&args.out, &summary)?;
    Ok(summary)
}

pub fn run_experiment(args: ExperimentArgs) -> Result<Value> {
    let shape = args.shape.shape()?;
    ensure_dir(&args.out)?;
    let b = args.b.unwrap_or(match args.variant {
        Variant::A => 1.0,
        Variant::B => 0.5,
    });
    // Estimation, certification, and interval extraction run over a
    // 10%-inflated box so the generator's caps sit strictly inside the
    // search region rather than on its boundary.
    let feasible = feasible_box(1.1 * args.a, 1.1 * b);
    let spec = GenSpec {
        shape,
        a: args.a,
        b,
        seed: args.seed,
    };
    let truth = generate_params(&spec)?;
    let total_steps = args
        .n
        .checked_add(args.n_test)
        .ok_or_else(|| anyhow!("N + n_test overflows"))?;
    if args.n == 0 || args.n_test < args.p_max.max(1) {
        bail!(
            "need N >= 1 and n_test >= p_max (got N={}, n_test={}, p_max={})",
            args.n,
            args.n_test,
            args.p_max
        );
    }
    let traj = simulate_poisson(&truth, LinkFunction::Identity, total_steps, args.seed, None)?;
    write_trajectory_csv(&args.out.join("trajectory.csv"), &traj)?;
    ModelFile::new(
        shape,
        LinkFunction::Identity,
        feasible_box(args.a, b),
        truth.as_flat().to_vec(),
    )
    .save(&args.out.join("truth.json"))?;

    // Per-step and running mean counts (growth diagnostics).
    let per_step: Vec<f64> = traj
        .states()
        .iter()
        .skip(shape.memory())
        .map(|s| s.iter().sum::<f64>() / shape.state_dim() as f64)
        .collect();
    write_growth_csv(&args.out.join("growth.csv"), &per_step)?;
    let running: Vec<f64> = per_step
        .iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .enumerate()
        .map(|(i, cum)| cum / (i + 1) as f64)
        .collect();
    let head = running.iter().take(10).sum::<f64>() / running.len().min(10) as f64;
    let growth_ratio = running.last().copied().unwrap_or(0.0) / head.max(f64::MIN_POSITIVE);
    let train_mean_late = {
        let half = &per_step[per_step.len().min(args.n) / 2..per_step.len().min(args.n)];
        half.iter().sum::<f64>() / half.len().max(1) as f64
    };

    let (train, test) = train_test_split(&traj, args.n)?;
    let fit = fit_trajectory(
        &train,
        LinkFunction::Identity,
        &feasible,
        &FitConfig::default(),
    )?;
    ModelFile::new(
        shape,
        LinkFunction::Identity,
        feasible,
        fit.beta_hat.as_flat().to_vec(),
    )
    .save(&args.out.join("model.json"))?;

    let cfg = certify_config(args.epsilon, args.alpha_grid, args.theta_grid);
    let suite = build_suite(
        &train,
        LinkFunction::Identity,
        &Weights::Uniform,
        &feasible,
        &cfg,
        args.threads,
    )?;
    let report = report_from_suite(&suite, &fit.beta_hat, Some(&truth))?;
    gglm_core::io::save_json(&args.out.join("bounds.json"), &report)?;
    write_recovery_summary(&args.out.join("table1.csv"), &report, shape.state_dim())?;
    write_sorted_errors(&args.out.join("sorted_errors.csv"), &report)?;

    let nct = noncoverage_table(&fit.beta_hat, LinkFunction::Identity, &test, args.p_max, args.level)?;
    write_noncoverage_csv(&args.out.join("table2.csv"), &nct)?;
    let forecast = forecast_intervals(
        &fit.beta_hat,
        LinkFunction::Identity,
        &train,
        args.n,
        args.p_max,
        args.level,
    )?;
    write_intervals_csv(&args.out.join("intervals.csv"), &forecast)?;

    let files = vec![
        "trajectory.csv",
        "truth.json",
        "model.json",
        "growth.csv",
        "bounds.json",
        "table1.csv",
        "sorted_errors.csv",
        "table2.csv",
        "intervals.csv",
    ];
    let mut summary = certify_summary("experiment", &report, &files);
    let extra = json!({
        "variant": match args.variant { Variant::A => "A", Variant::B => "B" },
        "a": args.a,
        "b": b,
        "train_steps": args.n,
        "test_steps": args.n_test,
        "seed": args.seed,
        "fit_iterations": fit.iterations,
        "fit_converged": fit.converged,
        "growth_ratio": growth_ratio,
        "train_mean_late": train_mean_late,
        "noncoverage_mean_by_p": mean_by_p(&nct),
        "noncoverage_persistent_mean": mean_of(&nct.persistent),
    });
    merge(&mut summary, extra);
    save_summary(&args.out, &summary)?;
    Ok(summary)
}

fn merge(base: &mut Value, extra: Value) {
    if let (Value::Object(b), Value::Object(e)) = (base, extra) {
        for (k, v) in e {
            b.insert(k, v);
        }
    }
}

fn mean_of(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn mean_by_p(table: &NoncoverageTable) -> Vec<f64> {
    table.rates.iter().map(|row| mean_of(row)).collect()
}

/// min / median / mean / max of a nonempty slice (median averages the two
/// middle order statistics for even lengths).
pub fn order_stats(vals: &[f64]) -> Option<(f64, f64, f64, f64)> {
    if vals.is_empty() {
        return None;
    }
    let mut sorted = vals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite stats"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Some((sorted[0], median, mean_of(&sorted), sorted[n - 1]))
}

struct ErrorColumns {
    actual: Option<Vec<f64>>,
    basic: Vec<f64>,
    advanced: Vec<f64>,
}

fn error_columns(report: &CertificationReport) -> ErrorColumns {
    let actual = report
        .coords
        .iter()
        .map(|c| c.actual_error())
        .collect::<Option<Vec<f64>>>();
    ErrorColumns {
        actual,
        basic: report.coords.iter().map(|c| c.basic_bound()).collect(),
        advanced: report.coords.iter().map(|c| c.advanced_bound()).collect(),
    }
}

fn certify_summary(command: &str, report: &CertificationReport, files: &[&str]) -> Value {
    let cols = error_columns(report);
    let med = |v: &[f64]| order_stats(v).map(|s| s.1);
    json!({
        "command": command,
        "kappa": report.coords.len(),
        "suite_size": report.suite_size,
        "union_count": report.union_count,
        "epsilon": report.epsilon,
        "coverage_certified": report.coverage_certified,
        "actual_error_median": cols.actual.as_deref().and_then(med),
        "basic_bound_median": med(&cols.basic),
        "advanced_bound_median": med(&cols.advanced),
        "files": files,
    })
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("creating {}", path.display())
    })?))
}

/// Table of error statistics by coordinate group: all coordinates, the `n`
/// birth-rate coordinates (flat indices `0..n`), and the `d*n^2` interaction
/// coordinates.
fn write_recovery_summary(path: &Path, report: &CertificationReport, n: usize) -> Result<()> {
    let cols = error_columns(report);
    let mut w = csv_writer(path)?;
    writeln!(w, "group,measure,count,min,median,mean,max")?;
    let groups: [(&str, Box<dyn Fn(usize) -> bool>); 3] = [
        ("all", Box::new(|_| true)),
        ("base", Box::new(move |j| j < n)),
        ("interaction", Box::new(move |j| j >= n)),
    ];
    for (name, keep) in &groups {
        let mut rows: Vec<(&str, &[f64])> = Vec::new();
        if let Some(actual) = &cols.actual {
            rows.push(("actual", actual));
        }
        rows.push(("basic_bound", &cols.basic));
        rows.push(("advanced_bound", &cols.advanced));
        for (measure, vals) in rows {
            let picked: Vec<f64> = vals
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, &v)| v)
                .collect();
            if let Some((min, median, mean, max)) = order_stats(&picked) {
                writeln!(
                    w,
                    "{name},{measure},{},{min},{median},{mean},{max}",
                    picked.len()
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Sorted error curves (each column independently ascending), the plot data
/// for comparing actual errors against both bound families.
fn write_sorted_errors(path: &Path, report: &CertificationReport) -> Result<()> {
    let cols = error_columns(report);
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        s
    };
    let basic = sorted(&cols.basic);
    let advanced = sorted(&cols.advanced);
    let actual = cols.actual.as_deref().map(sorted);
    let mut w = csv_writer(path)?;
    match &actual {
        Some(actual) => {
            writeln!(w, "rank,actual_error,basic_bound,advanced_bound")?;
            for j in 0..basic.len() {
                writeln!(w, "{},{},{},{}", j + 1, actual[j], basic[j], advanced[j])?;
            }
        }
        None => {
            writeln!(w, "rank,basic_bound,advanced_bound")?;
            for j in 0..basic.len() {
                writeln!(w, "{},{},{}", j + 1, basic[j], advanced[j])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_growth_csv(path: &Path, per_step: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "t,mean_count,running_mean")?;
    let mut cum = 0.0;
    for (i, &v) in per_step.iter().enumerate() {
        cum += v;
        writeln!(w, "{},{},{}", i + 1, v, cum / (i + 1) as f64)?;
    }
    w.flush()?;
    Ok(())
}

/// Noncoverage rates, one row per horizon plus a final persistent-baseline
/// row, one column per channel.
fn write_noncoverage_csv(path: &Path, table: &NoncoverageTable) -> Result<()> {
    let n = table.persistent.len();
    let mut w = csv_writer(path)?;
    let header: Vec<String> = std::iter::once("p".to_string())
        .chain((0..n).map(|k| format!("loc_{k}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, row) in table.rates.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{}", table.p_values[i], cells.join(","))?;
    }
    let cells: Vec<String> = table.persistent.iter().map(|v| v.to_string()).collect();
    writeln!(w, "persistent,{}", cells.join(","))?;
    w.flush()?;
    Ok(())
}

fn write_intervals_csv(path: &Path, table: &ForecastTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "horizon,channel,intensity,lo,hi")?;
    for (i, row) in table.rows.iter().enumerate() {
        for (k, &(intensity, lo, hi)) in row.iter().enumerate() {
            writeln!(w, "{},{k},{intensity},{lo},{hi}", i + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-test-step average rates: observed, model one-step, simulated, and
/// seasonal baselines.
fn write_metrics_csv(path: &Path, metrics: &MetricsReport, n_train: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    writeln!(w, "step,observed,predicted,simulated,seasonal")?;
    for i in 0..metrics.observed.len() {
        writeln!(
            w,
            "{},{},{},{},{}",
            n_train + i + 1,
            metrics.observed[i],
            metrics.predicted[i],
            metrics.simulated[i],
            metrics.seasonal[i]
        )?;
    }
    w.flush()?;
    Ok(())
}

fn save_summary(out: &Path, summary: &Value) -> Result<()> {
    gglm_core::io::save_json(&out.join("summary.json"), summary)?;
    Ok(())
}
