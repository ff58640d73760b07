//! Command implementations behind the `prunebench` binary.
//!
//! Every command returns a [`CliError`] on failure; [`CliError::exit_code`]
//! maps it onto the process exit status (2 config, 3 pipeline, 4 I/O).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use prunebench_core::config::{self, RunManifest};
use prunebench_core::data;
use prunebench_core::fleet::{self, FleetResult};
use prunebench_core::model::{flops_per_sample, Pass};
use prunebench_core::{Error, ExperimentConfig, Method};

pub mod report;

pub use report::{Report, ReportRow};

#[derive(Debug, Parser)]
#[command(
    name = "prunebench",
    version,
    about = "Importance-based dataset pruning on a simulated device fleet"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file from a dataset spec.
    GenData {
        /// Dataset spec (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output `.pbds` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured pruning ratio and methods.
    Run(RunArgs),
    /// Run a list of pruning ratios.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated pruning ratios.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        rhos: Vec<f64>,
    },
    /// Summarize a run or sweep directory.
    Report {
        /// Directory holding `sweep.csv`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads. Results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    pub seed_override: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{}:{line}: {reason}", path.display())]
    Format {
        path: PathBuf,
        line: u64,
        reason: String,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Format { .. } => 4,
            CliError::Core(e) if e.is_config() => 2,
            CliError::Core(e) if e.is_io() => 4,
            CliError::Core(e) if matches!(e.root(), Error::Format { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// What a `run` or `sweep` produced.
#[derive(Debug)]
pub struct RunOutput {
    pub results: Vec<FleetResult>,
    pub manifest: RunManifest,
}

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let summary = cmd_gen_data(&config, &out)?;
            println!("{summary}");
        }
        Command::Run(args) => {
            let out = cmd_run(&args)?;
            print!("{}", summary_table(&out.results));
        }
        Command::Sweep { run, rhos } => {
            let out = cmd_sweep(&run, &rhos)?;
            print!("{}", summary_table(&out.results));
        }
        Command::Report { out } => {
            print!("{}", cmd_report(&out)?);
        }
    }
    Ok(())
}

/// Writes a synthetic dataset and returns a one-paragraph summary.
pub fn cmd_gen_data(spec_path: &Path, out_path: &Path) -> CliResult<String> {
    let spec = config::parse_dataset_spec(spec_path)?;
    let data = data::generate_synthetic(&spec)?;
    data::save_dataset(&data, out_path)?;
    let hist = data.class_histogram();
    Ok(format!(
        "{}: {} samples, {} features, {} classes, class counts {:?}",
        out_path.display(),
        data.len(),
        data.feature_dim(),
        data.num_classes(),
        hist
    ))
}

pub fn cmd_run(args: &RunArgs) -> CliResult<RunOutput> {
    let cfg = load(args)?;
    let rhos = [cfg.pruning.rho];
    execute_sweep(args, cfg, &rhos, "run", |_| PathBuf::from("traces"))
}

pub fn cmd_sweep(args: &RunArgs, rhos: &[f64]) -> CliResult<RunOutput> {
    if rhos.is_empty() {
        return Err(CliError::Usage("--rhos needs at least one ratio".into()));
    }
    let cfg = load(args)?;
    execute_sweep(args, cfg, rhos, "sweep", |rho| {
        Path::new("traces").join(format!("rho_{rho}"))
    })
}

pub fn cmd_report(out_dir: &Path) -> CliResult<String> {
    let report = Report::load(out_dir)?;
    Ok(report.to_string())
}

fn load(args: &RunArgs) -> CliResult<ExperimentConfig> {
    if args.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let mut cfg = config::parse_config(&args.config)?;
    if let Some(seed) = args.seed_override {
        cfg.seeds = vec![seed];
        cfg.validate()?;
    }
    Ok(cfg)
}

fn execute_sweep(
    args: &RunArgs,
    cfg: ExperimentConfig,
    rhos: &[f64],
    command: &str,
    trace_dir: impl Fn(f64) -> PathBuf,
) -> CliResult<RunOutput> {
    let base = args.config.parent().unwrap_or(Path::new("."));
    let corpus = cfg.load_corpus(base)?;
    let layout = cfg.layout_for(&corpus)?;
    let mut manifest = RunManifest::new(&cfg, command);
    manifest.workers = args.workers;
    manifest.rhos = rhos.to_vec();
    manifest.train_step_flops =
        flops_per_sample(&layout, Pass::ForwardBackward) * cfg.train.batch_size as u64;

    log::info!(
        "{command}: {} samples, {} devices, rhos {rhos:?}, seeds {:?}",
        corpus.len(),
        cfg.partition.num_devices,
        cfg.seeds
    );
    let started = Instant::now();
    let results = fleet::sweep_rho(&cfg, &corpus, rhos, &cfg.methods, args.workers)?;
    log::info!("{command}: finished in {:.2?}", started.elapsed());

    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    let sweep = fleet::sweep_csv(&results, &cfg.weights);
    write(&args.out.join("sweep.csv"), &sweep)?;
    outputs.push("sweep.csv".to_string());
    if command == "sweep" {
        write(&args.out.join("gap.csv"), &fleet::gap_csv(&results)?)?;
        outputs.push("gap.csv".to_string());
    }
    for &rho in rhos {
        let rel = trace_dir(rho);
        let at_rho: Vec<FleetResult> = results.iter().filter(|r| r.rho == rho).cloned().collect();
        for name in fleet::write_traces(&at_rho, &args.out.join(&rel))? {
            outputs.push(rel.join(name).display().to_string());
        }
    }

    manifest.sweep_rows = sweep.lines().count() - 1;
    manifest.warmup_wall_s = fleet_time(&results, true);
    manifest.train_wall_s = fleet_time(&results, false);
    outputs.push("manifest.json".to_string());
    manifest.outputs = outputs;
    manifest.finish();
    write(&args.out.join("manifest.json"), &manifest.to_json())?;
    Ok(RunOutput { results, manifest })
}

/// Wall-clock seconds summed over every (rho, method, seed) run; warm-up is
/// counted once per seed since it is shared across ratios.
fn fleet_time(results: &[FleetResult], warmup: bool) -> f64 {
    if warmup {
        let mut seen = std::collections::BTreeSet::new();
        results
            .iter()
            .filter(|r| r.method == Method::Importance && seen.insert(r.seed))
            .map(|r| r.warmup_time().as_secs_f64())
            .sum()
    } else {
        results.iter().map(|r| r.train_time().as_secs_f64()).sum()
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Fleet test accuracy per (rho, method), averaged over seeds.
pub fn summary_table(results: &[FleetResult]) -> String {
    use std::collections::BTreeMap;
    use std::fmt::Write;

    let mut acc: BTreeMap<(u64, Method), (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry((r.rho.to_bits(), r.method)).or_default();
        e.0 += r.test_acc;
        e.1 += 1;
    }
    let mut out = String::from("rho     method      test_acc  seeds\n");
    for ((rho, method), (sum, n)) in acc {
        let _ = writeln!(
            out,
            "{:<7} {:<11} {:<9.4} {n}",
            f64::from_bits(rho),
            method.as_str(),
            sum / n as f64
        );
    }
    out
}
