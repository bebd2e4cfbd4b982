//! `dpsc`: data generation, private sparse logistic training, budget
//! accounting and grid experiments from a JSON config.

mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpsc::accountant::{format_plan_table, write_plans_csv, PrivacyParams, PrivacyPlan};
use dpsc::data::{
    apply_csv, load_csv, read_dataset, synth_generate, write_dataset, PreprocessReport,
};
use dpsc::evaluation::{evaluate, run_experiment};
use dpsc::model::{LossSpec, Penalty};
use dpsc::{run_dpsc, Dataset, NoiseMode, SolverConfig};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use config::{Command, Manifest, RunConfig, SeedEntry};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Accountant(String),
    Solver(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Accountant(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Accountant(m) => write!(f, "accountant: {m}"),
            CliError::Solver(m) => write!(f, "solver: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<dpsc::Error> for CliError {
    fn from(e: dpsc::Error) -> Self {
        use dpsc::Error as E;
        let msg = e.to_string();
        match e {
            E::PlanRejected { .. } | E::InfeasibleBudget { .. } => CliError::Accountant(msg),
            E::Divergence { .. } => CliError::Solver(msg),
            E::Io { .. } | E::Csv(_) | E::Parse { .. } => CliError::Io(msg),
            E::InvalidParameter { .. }
            | E::DimensionMismatch(_)
            | E::RowNormExceeded { .. }
            | E::InvalidLabel { .. }
            | E::Json(_) => CliError::Config(msg),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(
    name = "dpsc",
    version,
    about = "Differentially private sparse logistic regression"
)]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config, or a manifest written by an earlier run.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set solver.alpha=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Action {
    /// Write a synthetic dataset plus a sidecar with the true coefficients.
    Generate(ConfigArgs),
    /// Fit one model and write it with its per-iteration trace.
    Train(ConfigArgs),
    /// Print (epsilon, gamma) plans.
    Accountant(ConfigArgs),
    /// Run a grid of repeated solves and write the results table.
    Experiment(ConfigArgs),
    /// Score a saved model on a test set.
    Metrics(ConfigArgs),
    /// Rerun the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

/// The saved result of `train`.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    penalty: Penalty,
    w_final: Vec<f64>,
    z_final: Vec<f64>,
    epsilon_spent: Option<f64>,
    gamma: Option<f64>,
    preprocess: Option<PreprocessReport>,
}

/// Written next to a generated dataset.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    true_w: Vec<f64>,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_manifest(
    cfg: &RunConfig,
    default_base: &Path,
    seeds: Vec<SeedEntry>,
) -> Result<(), CliError> {
    let path = cfg
        .paths
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(default_base, ".manifest.json"));
    write_json(
        &path,
        &Manifest {
            config: cfg.clone(),
            seeds,
        },
    )
}

fn seed(name: &str, seed: u64) -> SeedEntry {
    SeedEntry {
        name: name.to_string(),
        seed,
    }
}

fn load_data(
    cfg: &RunConfig,
    path: &Path,
) -> Result<(Dataset, Option<PreprocessReport>), CliError> {
    match &cfg.schema {
        Some(schema) => {
            let (data, report) = load_csv(path, schema)?;
            Ok((data, Some(report)))
        }
        None => Ok((read_dataset(path)?, None)),
    }
}

fn cmd_generate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.require(&cfg.paths.out, "out")?;
    let (data, true_w) = synth_generate(&cfg.synth)?;
    write_dataset(out, &data)?;
    write_json(
        &sibling(out, ".meta.json"),
        &Sidecar {
            seed: cfg.synth.seed,
            true_w: true_w.to_vec(),
        },
    )?;
    write_manifest(cfg, out, vec![seed("synth", cfg.synth.seed)])?;
    eprintln!(
        "wrote {} rows x {} columns to {}",
        data.n(),
        data.p(),
        out.display()
    );
    Ok(())
}

fn privacy_plan(cfg: &RunConfig, n: usize) -> Option<PrivacyPlan> {
    let params = PrivacyParams::new(cfg.solver.max_iter, cfg.solver.c, n, &LossSpec::logistic());
    match (cfg.privacy.epsilon, cfg.privacy.gamma) {
        (Some(eps), _) => Some(PrivacyPlan::for_epsilon(eps, &params)),
        (None, Some(gamma)) => Some(PrivacyPlan::for_gamma(gamma, &params)),
        (None, None) => None,
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data_path = cfg.require(&cfg.paths.data, "data")?;
    let model_path = cfg.require(&cfg.paths.model, "model")?;
    let (data, preprocess) = load_data(cfg, data_path)?;
    let plan = privacy_plan(cfg, data.n());
    let solver = SolverConfig {
        noise_mode: if plan.is_some() {
            cfg.solver.noise_mode
        } else {
            NoiseMode::Off
        },
        ..cfg.solver
    };
    if let Some(plan) = &plan {
        if solver.noise_mode != NoiseMode::Off {
            plan.ensure_valid()?;
        }
    }
    let plan = plan.filter(|_| solver.noise_mode != NoiseMode::Off);
    let result = run_dpsc(
        &data,
        &LossSpec::logistic(),
        &cfg.penalty,
        &solver,
        plan.as_ref(),
    )?;

    write_json(
        model_path,
        &ModelFile {
            penalty: cfg.penalty,
            w_final: result.w_final.to_vec(),
            z_final: result.z_final.to_vec(),
            epsilon_spent: result.epsilon_spent,
            gamma: result.gamma,
            preprocess,
        },
    )?;
    if let Some(trace) = &cfg.paths.trace {
        let file = File::create(trace).map_err(|e| io_err(trace, e))?;
        result.write_trace_csv(BufWriter::new(file))?;
    }
    write_manifest(cfg, model_path, vec![seed("solver", cfg.solver.seed)])?;
    let last = result.trace.last().expect("at least one iteration");
    eprintln!(
        "trained {} iterations, objective {:.6}, epsilon spent {}",
        result.trace.len(),
        last.objective,
        result
            .epsilon_spent
            .map_or("none".to_string(), |e| e.to_string())
    );
    Ok(())
}

fn cmd_accountant(cfg: &RunConfig) -> Result<(), CliError> {
    let params = PrivacyParams::new(
        cfg.solver.max_iter,
        cfg.solver.c,
        cfg.accountant.n,
        &LossSpec::logistic(),
    );
    let mut plans: Vec<PrivacyPlan> = cfg
        .accountant
        .epsilons
        .iter()
        .map(|&e| PrivacyPlan::for_epsilon(e, &params))
        .collect();
    plans.extend(
        cfg.accountant
            .gammas
            .iter()
            .map(|&g| PrivacyPlan::for_gamma(g, &params)),
    );
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let table = format_plan_table(&plans);
    out.write_all(table.as_bytes())
        .map_err(|e| CliError::Io(e.to_string()))?;
    match &cfg.paths.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| io_err(path, e))?;
            write_plans_csv(BufWriter::new(file), &plans)?;
            write_manifest(cfg, path, Vec::new())?;
        }
        None => {
            writeln!(out).map_err(|e| CliError::Io(e.to_string()))?;
            write_plans_csv(&mut out, &plans)?;
        }
    }
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.require(&cfg.paths.out, "out")?;
    let grid = cfg.experiment_grid();
    let output = run_experiment(&grid, cfg.paths.cache.as_deref())?;
    let file = File::create(out).map_err(|e| io_err(out, e))?;
    output.write_csv(BufWriter::new(file))?;

    let mut seeds = vec![seed("master", grid.master_seed)];
    for s in &output.seeds {
        seeds.push(seed(&format!("data n={} r={}", s.n, s.repeat), s.data_seed));
        seeds.push(seed(
            &format!("split n={} r={}", s.n, s.repeat),
            s.split_seed,
        ));
    }
    write_manifest(cfg, out, seeds)?;

    let stderr = io::stderr();
    let mut log = stderr.lock();
    for row in &output.rows {
        let _ = writeln!(
            log,
            "{:<5} n={:<6} eps={:<5} ce={:.4} can={:.2} ican={:.2}{}",
            row.algorithm.name(),
            row.n,
            row.epsilon,
            row.ce_mean,
            row.can_mean,
            row.ican_mean,
            if row.valid { "" } else { " (infeasible)" }
        );
    }
    let _ = writeln!(
        log,
        "{} tasks computed, {} loaded from cache",
        output.tasks_computed, output.tasks_loaded
    );
    Ok(())
}

fn cmd_metrics(cfg: &RunConfig) -> Result<(), CliError> {
    let model_path = cfg.require(&cfg.paths.model, "model")?;
    let test_path = cfg.require(&cfg.paths.test, "test")?;
    let model: ModelFile = read_json(model_path)?;
    let test = match (&cfg.schema, &model.preprocess) {
        (Some(schema), Some(fitted)) => apply_csv(test_path, schema, fitted)?.0,
        (Some(schema), None) => load_csv(test_path, schema)?.0,
        (None, _) => read_dataset(test_path)?,
    };
    let truth = match &cfg.paths.truth {
        Some(path) => Some(Array1::from(read_json::<Sidecar>(path)?.true_w)),
        None => None,
    };
    let result = dpsc::SolveResult {
        w_final: Array1::from(model.w_final),
        z_final: Array1::from(model.z_final),
        v_final: Array1::zeros(0),
        trace: Vec::new(),
        epsilon_spent: model.epsilon_spent,
        gamma: model.gamma,
    };
    let report = evaluate(
        &result,
        &test,
        truth.as_ref().map(|t| t.view()),
        cfg.grid.support_threshold,
    )?;
    match &cfg.paths.out {
        Some(path) => write_json(path, &report),
        None => {
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::Config(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn run(mut cfg: RunConfig, command: Command) -> Result<(), CliError> {
    cfg.command = Some(command);
    cfg.resolve_seeds();
    match command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Accountant => cmd_accountant(&cfg),
        Command::Experiment => cmd_experiment(&cfg),
        Command::Metrics => cmd_metrics(&cfg),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (args, command) = match cli.action {
        Action::Generate(a) => (a, Command::Generate),
        Action::Train(a) => (a, Command::Train),
        Action::Accountant(a) => (a, Command::Accountant),
        Action::Experiment(a) => (a, Command::Experiment),
        Action::Metrics(a) => (a, Command::Metrics),
        Action::Replay {
            manifest,
            overrides,
        } => {
            let cfg = config::load(Some(&manifest), &overrides)?;
            let command = cfg
                .command
                .ok_or_else(|| CliError::Config("manifest does not record a command".into()))?;
            return run(cfg, command);
        }
    };
    let cfg = config::load(args.config.as_deref(), &args.overrides)?;
    run(cfg, command)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpsc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
