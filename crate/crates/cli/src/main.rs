use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use nlmevi::io::{
    param_table, prediction_bands, read_dataset_csv, write_bands_csv, write_dataset_csv,
    write_ebe_csv, write_history_csv, FitReport, IoError, ParamEstimate, RunConfig, UqReport,
};
use nlmevi::nlme::{ebe, Dataset, NlmeError};
use nlmevi::nn::Encoder;
use nlmevi::oracle::{run_all, OracleError};
use nlmevi::study::{multistart, run_study, ScenarioSpec, StudyError, SCHEMA_VERSION};
use nlmevi::train::{encoder_for, fit, TrainError};
use nlmevi::uq::{observed_fim, UqError};

const WORKERS_ENV: &str = "NLMEVI_WORKERS";

#[derive(Parser)]
#[command(
    name = "nlmevi",
    version,
    about = "Amortized variational inference for NLME-ODE models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one cohort; writes data.csv and truth.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replicate index whose seed is used.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Fit a dataset; writes fit.json, loss_history.csv, ebe.csv and
    /// population_bands.csv.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV, or a directory holding data.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Observed Fisher information at a fit; writes uq.json.
    Uq {
        /// fit.json, or a directory holding it.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the Monte-Carlo sample count stored with the fit.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Replicated simulation study; writes study.json and replicates.csv.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Refit one dataset from several starting points.
    Multistart {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the analytic oracle suite.
    OracleCheck {
        #[arg(long, default_value_t = 10_000_000)]
        kl_samples: usize,
    },
    /// Print a preset configuration.
    InitConfig {
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "s1")]
        scenario: String,
    },
}

#[derive(Debug)]
enum CliError {
    /// Bad input: exit code 1.
    Validation(String),
    /// The computation itself failed: exit code 2.
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    schema_version: u32,
    kind: &'a str,
    message: &'a str,
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Study(s) => s.into(),
            IoError::Mech(_) => CliError::Numerical(e.to_string()),
            other => validation(other),
        }
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Train(t) => t.into(),
            StudyError::InvalidScenario(_)
            | StudyError::Io(_)
            | StudyError::Csv(_)
            | StudyError::ZeroTruth => validation(e),
            StudyError::Mech(_) | StudyError::Nlme(NlmeError::InvalidInput(_)) => validation(e),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => validation(e),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<UqError> for CliError {
    fn from(e: UqError) -> Self {
        match e {
            UqError::InvalidInput(_) => validation(e),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        validation(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        validation(e)
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
    Ok(RunConfig::from_json(&text)?)
}

fn out_dir(out: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| validation("no output directory: pass --out or set output_dir"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn resolve(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_data(path: &Path, scenario: &ScenarioSpec) -> Result<Dataset, CliError> {
    let p = resolve(path, "data.csv");
    let f = File::open(&p).map_err(|e| validation(format!("{}: {e}", p.display())))?;
    Ok(read_dataset_csv(
        f,
        &scenario.model,
        Some(&scenario.design),
    )?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// `--workers`, then the environment, then all cores.
fn install_pool(workers: Option<usize>) -> Result<(), CliError> {
    let n = match workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| validation(format!("{WORKERS_ENV} must be a positive integer")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(validation("worker count must be positive"));
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        b = b.num_threads(n);
    }
    b.build_global()
        .map_err(|e| CliError::Numerical(e.to_string()))
}

#[derive(Serialize)]
struct Truth {
    schema_version: u32,
    scenario: ScenarioSpec,
    replicate: usize,
    params: Vec<ParamEstimate>,
}

fn simulate(config: &Path, out: Option<PathBuf>, replicate: usize) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let dir = out_dir(out, &cfg)?;
    let problem = cfg.scenario.problem()?;
    let data = cfg.scenario.simulate(&problem, replicate)?;
    write_dataset_csv(&data, create(&dir.join("data.csv"))?)?;
    write_json(
        &dir.join("truth.json"),
        &Truth {
            schema_version: SCHEMA_VERSION,
            scenario: cfg.scenario.clone(),
            replicate,
            params: param_table(&problem, &problem.phi_truth()),
        },
    )?;
    println!("wrote {} subjects to {}", data.len(), dir.display());
    Ok(())
}

fn fit_cmd(config: &Path, data: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let study = cfg.study_config();
    let problem = cfg.scenario.problem()?;
    let data = load_data(data, &cfg.scenario)?;
    let dir = out_dir(out, &cfg)?;
    let result = fit(&data, &problem, &study.encoder, &study.train)?;
    let encoder =
        Encoder::new(encoder_for(&study.encoder, &data, &problem)).map_err(TrainError::from)?;
    let ids: Vec<String> = data.subjects.iter().map(|s| s.id.clone()).collect();
    let ebes = data
        .subjects
        .iter()
        .map(|s| ebe(&encoder, &result.psi, s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(TrainError::from)?;
    write_ebe_csv(&ids, &ebes, create(&dir.join("ebe.csv"))?)?;
    write_history_csv(&result, create(&dir.join("loss_history.csv"))?)?;
    let horizon = data.horizon();
    let times: Vec<f64> = (1..=100).map(|j| horizon * j as f64 / 100.0).collect();
    let bands = prediction_bands(&problem, &result.phi, &times, 500, 0)?;
    write_bands_csv(&bands, create(&dir.join("population_bands.csv"))?)?;
    let report = FitReport::new(&problem, &cfg.scenario, &study, result);
    write_json(&dir.join("fit.json"), &report)?;
    println!(
        "stopped by {:?} after {} epochs",
        report.stop_reason, report.epochs_run
    );
    for p in &report.params {
        println!(
            "{:<20} {:>12.6} ({} scale)  natural {:.6}",
            p.name, p.estimate, p.scale, p.natural_estimate
        );
    }
    Ok(())
}

fn uq_cmd(
    fit_path: &Path,
    data: &Path,
    out: &Path,
    samples: Option<usize>,
) -> Result<(), CliError> {
    let p = resolve(fit_path, "fit.json");
    let text = fs::read_to_string(&p).map_err(|e| validation(format!("{}: {e}", p.display())))?;
    let report: FitReport = serde_json::from_str(&text)?;
    if report.schema_version != SCHEMA_VERSION {
        return Err(validation(format!(
            "fit schema_version {} unsupported",
            report.schema_version
        )));
    }
    let problem = report.scenario.problem()?;
    let data = load_data(data, &report.scenario)?;
    let encoder =
        Encoder::new(encoder_for(&report.encoder, &data, &problem)).map_err(TrainError::from)?;
    let mut uq = report.uq.clone();
    if let Some(n) = samples {
        uq.n_samples = n;
    }
    let v = observed_fim(
        &problem,
        &data,
        &report.result.phi,
        uq.n_samples,
        uq.seed,
        uq.proposal(&encoder, &report.result.psi),
    )?;
    fs::create_dir_all(out)?;
    let r = UqReport::new(&problem, v);
    write_json(&out.join("uq.json"), &r)?;
    for p in &r.params {
        println!(
            "{:<20} {:>12.6} se {:.6}  95% [{:.6}, {:.6}] ({} scale)",
            p.name, p.estimate, p.se, p.ci95_lower, p.ci95_upper, p.scale
        );
    }
    Ok(())
}

fn study_cmd(
    config: &Path,
    out: Option<PathBuf>,
    replicates: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(k) = replicates {
        cfg.scenario.n_replicates = k;
    }
    cfg.validate()?;
    let dir = out_dir(out, &cfg)?;
    let report = run_study(&cfg.scenario, &cfg.study_config())?;
    write_json(&dir.join("study.json"), &report)?;
    report.write_csv(create(&dir.join("replicates.csv"))?)?;
    println!(
        "{} replicates, {} fit failures, {} UQ failures",
        report.replicates.len(),
        report.fit_failures,
        report.uq_failures
    );
    for p in &report.params {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}%"));
        println!(
            "{:<20} rel.bias {:>8} rrmse {:>8} emp.cov {:.2} est.cov {}",
            p.name,
            pct(p.rel_bias_pct),
            pct(p.rrmse_pct),
            p.emp_cov,
            p.est_cov.map_or("n/a".into(), |c| format!("{c:.2}"))
        );
    }
    Ok(())
}

fn multistart_cmd(
    config: &Path,
    data: &Path,
    starts: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let data = load_data(data, &cfg.scenario)?;
    let dir = out_dir(out, &cfg)?;
    let n = starts.unwrap_or(cfg.scenario.n_starts);
    let report = multistart(&cfg.scenario, &cfg.study_config(), &data, n)?;
    write_json(&dir.join("multistart.json"), &report)?;
    report.write_csv(create(&dir.join("starts.csv"))?)?;
    for d in &report.dispersion {
        println!(
            "{:<20} range {:.4} std {:.4} clusters {}",
            d.name, d.range, d.std, d.clusters
        );
    }
    Ok(())
}

fn oracle_cmd(kl_samples: usize) -> Result<(), CliError> {
    let checks = run_all(kl_samples)?;
    for c in &checks {
        println!(
            "{} {:<32} measured {:.3e} tolerance {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        );
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "oracle checks failed: {}",
            failed.join(", ")
        )))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            replicate,
        } => {
            install_pool(Some(1))?;
            simulate(&config, out, replicate)
        }
        Command::Fit { config, data, out } => {
            install_pool(Some(1))?;
            fit_cmd(&config, &data, out)
        }
        Command::Uq {
            fit,
            data,
            out,
            samples,
        } => {
            install_pool(Some(1))?;
            uq_cmd(&fit, &data, &out, samples)
        }
        Command::Study {
            config,
            out,
            workers,
            replicates,
        } => {
            install_pool(workers)?;
            study_cmd(&config, out, replicates)
        }
        Command::Multistart {
            config,
            data,
            starts,
            out,
            workers,
        } => {
            install_pool(workers)?;
            multistart_cmd(&config, &data, starts, out)
        }
        Command::OracleCheck { kl_samples } => {
            install_pool(Some(1))?;
            oracle_cmd(kl_samples)
        }
        Command::InitConfig { model, scenario } => {
            let cfg = RunConfig::preset(&model, &scenario)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&CliError::Validation(e.to_string()));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.code())
        }
    }
}

fn report(e: &CliError) {
    let (kind, message) = match e {
        CliError::Validation(m) => ("validation", m.as_str()),
        CliError::Numerical(m) => ("numerical", m.as_str()),
    };
    let body = ErrorJson {
        schema_version: SCHEMA_VERSION,
        kind,
        message,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&body).unwrap_or_else(|_| message.to_string())
    );
}
