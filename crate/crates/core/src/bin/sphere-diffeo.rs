use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sphere_diffeo::baselines::{fit_projective, fit_rotation, ProjectiveFitConfig};
use sphere_diffeo::diffeo::SphereMap;
use sphere_diffeo::estimator::{fit, predict, FitConfig, RoughnessGradient};
use sphere_diffeo::evaluate::{cross_validate, mse, CvPlan, Pair, Role, Validation};
use sphere_diffeo::io::{self, AnyModel, ModelMetadata};
use sphere_diffeo::roughness::{deform_grid, roughness_report_with, JacobianScheme, DEFAULT_POLE_OFFSET};
use sphere_diffeo::simulate::{generate_dataset, run_no_data_experiment, PredictorLaw, SimProtocol, VmfParams};
use sphere_diffeo::sphere::UnitVector3;
use sphere_diffeo::{Error, Result};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// Diffeomorphic regression on the unit sphere.
#[derive(Parser)]
#[command(name = "sphere-diffeo", version)]
struct Cli {
    /// Worker threads for quadrature, basis evaluation and CV cells.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Omit the creation time from model metadata.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a diffeomorphic model or a baseline.
    Fit(FitCmd),
    /// Map predictors through a stored model.
    Predict(PredictCmd),
    /// Draw a synthetic train/test dataset from a known map.
    Simulate(SimulateCmd),
    /// Sweep (lambda, degree), select by validation MSE, optionally refit.
    Cv(CvCmd),
    /// Score Q and R of a model or a parametric map.
    Roughness(RoughnessCmd),
    /// Roughness-only ascent from a parametric map.
    Nodata(NodataCmd),
    /// Write the deformed polar grid of a model or map.
    ExportGrid(ExportGridCmd),
    /// MSE of one or more models on a dataset.
    Eval(EvalCmd),
}

#[derive(Args, Clone)]
struct FitFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    degree: Option<usize>,
    /// Step size of each gradient step.
    #[arg(long)]
    step: Option<f64>,
    /// Finite-difference increment for the roughness gradient.
    #[arg(long)]
    eps: Option<f64>,
    /// Grid resolution M used for the roughness.
    #[arg(long)]
    m_grid: Option<usize>,
    /// Colatitude offset of the grid from the poles.
    #[arg(long)]
    delta_pole: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum)]
    roughness_gradient: Option<GradientArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradientArg {
    Fd,
    Adjoint,
}

impl FitFlags {
    fn config(&self, seed: u64) -> FitConfig {
        let d = FitConfig::default();
        FitConfig {
            lambda: self.lambda.unwrap_or(d.lambda),
            degree: self.degree.unwrap_or(d.degree),
            step: self.step.unwrap_or(d.step),
            eps: self.eps.unwrap_or(d.eps),
            grid: self.m_grid.unwrap_or(d.grid),
            pole_offset: self.delta_pole.unwrap_or(d.pole_offset),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            tol: self.tol.unwrap_or(d.tol),
            seed,
            roughness_gradient: match self.roughness_gradient {
                None => d.roughness_gradient,
                Some(GradientArg::Fd) => RoughnessGradient::ForwardDifference,
                Some(GradientArg::Adjoint) => RoughnessGradient::Adjoint,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Diffeo,
    Rotation,
    Projective,
}

#[derive(Args)]
struct FitCmd {
    /// Training data, schema x1..x3,y1..y3 or x1..x3,v1..v3.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long, value_enum, default_value = "diffeo")]
    variant: Variant,
    /// Optional CSV trace of the ascent.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct PredictCmd {
    #[arg(long)]
    model: PathBuf,
    /// CSV whose first columns are x1,x2,x3.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateCmd {
    /// identity, nodata-init, twist:<r>, composite[:<seed>] or a map JSON file.
    #[arg(long, default_value = "composite")]
    truth: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    /// Concentration of the training predictors about the north pole.
    #[arg(long, default_value_t = 5.0)]
    kappa_x: f64,
    /// Response concentration.
    #[arg(long, default_value_t = 100.0)]
    kappa_y: f64,
}

#[derive(Args)]
struct CvCmd {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated lambda grid.
    #[arg(long, value_delimiter = ',', default_value = "1e-5,1e-4,1e-3,1e-2")]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "3,10")]
    degrees: Vec<usize>,
    /// Use k folds instead of a single 75/25 holdout.
    #[arg(long)]
    kfold: Option<usize>,
    #[arg(long)]
    table_out: PathBuf,
    /// Refit on all data at the selected cell and store the model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct Target {
    /// Stored model envelope.
    #[arg(long, conflicts_with = "map", required_unless_present = "map")]
    model: Option<PathBuf>,
    /// identity, nodata-init, twist:<r>, composite[:<seed>] or a map JSON file.
    #[arg(long)]
    map: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Embedded,
    PolarChart,
}

#[derive(Args)]
struct RoughnessCmd {
    #[command(flatten)]
    target: Target,
    #[arg(long, default_value_t = 200)]
    m_grid: usize,
    #[arg(long, default_value_t = DEFAULT_POLE_OFFSET)]
    delta_pole: f64,
    #[arg(long, value_enum, default_value = "embedded")]
    scheme: SchemeArg,
}

#[derive(Args)]
struct NodataCmd {
    #[arg(long, default_value = "nodata-init")]
    init: String,
    #[arg(long)]
    trace_out: PathBuf,
    #[command(flatten)]
    flags: FitFlags,
}

#[derive(Args)]
struct ExportGridCmd {
    #[command(flatten)]
    target: Target,
    #[arg(long, default_value_t = 50)]
    m_grid: usize,
    #[arg(long, default_value_t = DEFAULT_POLE_OFFSET)]
    delta_pole: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    data: PathBuf,
    /// `label=path` of a stored model; repeatable.
    #[arg(long = "model", required_unless_present = "truth")]
    models: Vec<String>,
    /// Also score the generating map (same forms as `simulate --truth`).
    #[arg(long)]
    truth: Option<String>,
    /// CSV report `model,n,mse`; stdout JSON only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_target(t: &Target, seed: u64) -> Result<Box<dyn SphereMap + Sync>> {
    match (&t.model, &t.map) {
        (Some(p), _) => Ok(Box::new(io::read_model(p)?.0)),
        (None, Some(m)) => Ok(Box::new(io::resolve_map(m, seed)?)),
        (None, None) => Err(Error::InvalidConfig("one of --model or --map is required".into())),
    }
}

fn metadata(cli: &Cli, lambda: Option<f64>) -> ModelMetadata {
    ModelMetadata {
        seed: Some(cli.seed),
        lambda,
        created: (!cli.no_timestamp).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())),
    }
}

fn fit_variant(variant: Variant, data: &[Pair], cfg: &FitConfig) -> Result<(AnyModel, Option<sphere_diffeo::estimator::FitTrace>)> {
    Ok(match variant {
        Variant::Diffeo => {
            let (m, trace) = fit(data, cfg)?;
            (AnyModel::Diffeo(m), Some(trace))
        }
        Variant::Rotation => (AnyModel::Rotation(fit_rotation(data)?), None),
        Variant::Projective => (
            AnyModel::Projective(fit_projective(data, &ProjectiveFitConfig::default())?),
            None,
        ),
    })
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Fit(c) => {
            let data = io::read_dataset(&c.data)?;
            let cfg = c.flags.config(cli.seed);
            cfg.validate()?;
            let (model, trace) = fit_variant(c.variant, &data, &cfg)?;
            let lambda = matches!(c.variant, Variant::Diffeo).then_some(cfg.lambda);
            io::write_model(&c.model_out, &model, &metadata(cli, lambda))?;
            let mut out = json!({"variant": model.variant(), "n": data.len()});
            if let Some(t) = trace {
                if let Some(p) = &c.trace_out {
                    io::write_trace(p, &t)?;
                }
                let last = t.final_record();
                out["iterations"] = t.records.len().into();
                out["objective"] = last.objective.into();
                out["termination"] = format!("{:?}", t.termination).into();
            }
            Ok(out)
        }
        Command::Predict(c) => {
            let (model, _) = io::read_model(&c.model)?;
            let xs = io::read_points(&c.input)?;
            let ys = predict(&model, &xs);
            io::write_predictions(&c.out, &xs, &ys)?;
            Ok(json!({"n": xs.len()}))
        }
        Command::Simulate(c) => {
            let truth = io::resolve_map(&c.truth, cli.seed)?;
            let protocol = SimProtocol {
                n_train: c.n_train,
                n_test: c.n_test,
                train_law: PredictorLaw::Vmf(VmfParams::new(UnitVector3::north_pole(), c.kappa_x)?),
                test_law: PredictorLaw::Uniform,
                response_kappa: c.kappa_y,
                truth: truth.clone(),
                seed: cli.seed,
            };
            let ds = generate_dataset(&protocol)?;
            std::fs::create_dir_all(&c.out_dir)?;
            io::write_dataset(&c.out_dir.join("train.csv"), &ds.subset(Role::Train))?;
            io::write_dataset(&c.out_dir.join("test.csv"), &ds.subset(Role::Test))?;
            io::write_map(&c.out_dir.join("truth.json"), &truth)?;
            Ok(json!({"n_train": c.n_train, "n_test": c.n_test, "out_dir": c.out_dir}))
        }
        Command::Cv(c) => {
            let data = io::read_dataset(&c.data)?;
            let template = c.flags.config(cli.seed);
            let mut plan = CvPlan::holdout(c.lambdas.clone(), c.degrees.clone(), cli.seed);
            if let Some(k) = c.kfold {
                plan.validation = Validation::KFold { k };
            }
            let res = cross_validate(&data, &plan, &template)?;
            io::write_cv_table(&c.table_out, &res.table)?;
            let mut out = json!({"best_lambda": res.best_lambda, "best_degree": res.best_degree});
            if let Some(p) = &c.model_out {
                let cfg = FitConfig {
                    lambda: res.best_lambda,
                    degree: res.best_degree,
                    ..template
                };
                let (m, trace) = fit(&data, &cfg)?;
                io::write_model(p, &AnyModel::Diffeo(m), &metadata(cli, Some(cfg.lambda)))?;
                if let Some(tp) = &c.trace_out {
                    io::write_trace(tp, &trace)?;
                }
                out["iterations"] = trace.records.len().into();
            }
            Ok(out)
        }
        Command::Roughness(c) => {
            let gamma = resolve_target(&c.target, cli.seed)?;
            let grid = deform_grid(&gamma, c.m_grid, c.delta_pole)?;
            let scheme = match c.scheme {
                SchemeArg::Embedded => JacobianScheme::Embedded,
                SchemeArg::PolarChart => JacobianScheme::PolarChart,
            };
            let rep = roughness_report_with(&grid, scheme);
            Ok(json!({"q": rep.q, "r": rep.r, "singular_cells": rep.singular_cell_count, "m_grid": c.m_grid}))
        }
        Command::Nodata(c) => {
            let init = io::resolve_map(&c.init, cli.seed)?;
            let mut cfg = c.flags.config(cli.seed);
            if c.flags.lambda.is_none() {
                cfg.lambda = 1.0;
            }
            let run = run_no_data_experiment(&init, &cfg)?;
            io::write_trace(&c.trace_out, &run.trace)?;
            Ok(json!({
                "initial_r": run.trace.initial.roughness,
                "final_r": run.trace.final_record().roughness,
                "iterations": run.trace.records.len(),
                "accepted_steps": run.trace.accepted_steps(),
                "termination": format!("{:?}", run.trace.termination),
            }))
        }
        Command::ExportGrid(c) => {
            let gamma = resolve_target(&c.target, cli.seed)?;
            let grid = deform_grid(&gamma, c.m_grid, c.delta_pole)?;
            io::write_grid(&c.out, &grid)?;
            Ok(json!({"m_grid": c.m_grid, "rows": c.m_grid * c.m_grid}))
        }
        Command::Eval(c) => {
            let data = io::read_dataset(&c.data)?;
            let (xs, ys): (Vec<_>, Vec<_>) = data.iter().map(|p| (p.x, p.y)).unzip();
            let mut rows: Vec<(String, f64)> = Vec::new();
            if let Some(t) = &c.truth {
                let truth = io::resolve_map(t, cli.seed)?;
                rows.push(("TRUE".into(), mse(&ys, &predict(&truth, &xs))?));
            }
            for spec in &c.models {
                let (label, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidConfig(format!("--model expects label=path, got {spec:?}")))?;
                let (model, _) = io::read_model(Path::new(path))?;
                rows.push((label.to_string(), mse(&ys, &predict(&model, &xs))?));
            }
            if let Some(p) = &c.out {
                let mut w = csv::Writer::from_path(p).map_err(Error::from)?;
                w.write_record(["model", "n", "mse"]).map_err(Error::from)?;
                for (label, v) in &rows {
                    w.write_record([label.clone(), xs.len().to_string(), v.to_string()])
                        .map_err(Error::from)?;
                }
                // the kernel-based NLL comparison is external to this tool
                w.write_record(["NLL", &xs.len().to_string(), "NA"]).map_err(Error::from)?;
                w.flush()?;
            }
            let report: serde_json::Map<_, _> = rows.into_iter().map(|(l, v)| (l, json!(v))).collect();
            Ok(json!({"n": xs.len(), "mse": report, "not_available": ["NLL"]}))
        }
    }
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match error_code(e) {
        EXIT_USAGE => "usage",
        EXIT_NUMERICAL => "numerical",
        _ => "data",
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": kind, "message": message, "exit_code": code}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), EXIT_USAGE),
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail("usage", "--threads must be at least 1", EXIT_USAGE);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => return fail("usage", &e.to_string(), EXIT_USAGE),
    };
    match pool.install(|| run(&cli)) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), &e.to_string(), error_code(&e)),
    }
}
