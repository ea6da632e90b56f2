//! Command-line driver for distributionally robust stratified sampling
//! experiments.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use drstrat_core::bo::Method;
use sha2::{Digest, Sha256};

pub use error::CliError;
use output::Outputs;

#[derive(Debug, Parser)]
#[command(name = "drstrat", version, about = "Distributionally robust stratified sampling allocations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    DrStrat,
    StrM,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::DrStrat => Method::DrStr,
            MethodArg::StrM => Method::StrM,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, env = "DRSTRAT_THREADS")]
    pub threads: Option<usize>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Log solver diagnostics.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize an allocation (report.json, allocation.csv, trace.csv).
    Solve {
        #[command(flatten)]
        common: Common,
        /// Objective: worst case over the ambiguity sets, or the nominal models only
        #[arg(long, value_enum, default_value = "dr-strat")]
        method: MethodArg,
    },
    /// Nominal and worst-case variances of an allocation (evaluation.csv).
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// JSON array, solve report.json, or allocation.csv
        #[arg(long)]
        allocation: PathBuf,
    },
    /// Monte Carlo replication of the estimator at an allocation (replication.csv).
    Replicate {
        #[command(flatten)]
        common: Common,
        /// JSON array, solve report.json, or allocation.csv
        #[arg(long)]
        allocation: PathBuf,
        /// Independent estimator replications (at least 2)
        #[arg(long, default_value_t = 10_000)]
        replications: usize,
    },
    /// Solve with both methods and compare worst-case variances (compare.json).
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Solve { common, .. }
            | Self::Evaluate { common, .. }
            | Self::Replicate { common, .. }
            | Self::Compare { common } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Solve { .. } => "solve",
            Self::Evaluate { .. } => "evaluate",
            Self::Replicate { .. } => "replicate",
            Self::Compare { .. } => "compare",
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs one command and writes its outputs. Returns the output directory.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let common = cli.command.common();
    let source = std::fs::read_to_string(&common.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", common.config.display())))?;
    let exp = config::load(&source, common.seed).map_err(|e| match e {
        CliError::Config { line, message, .. } => {
            CliError::Config { file: Some(common.config.display().to_string()), line, message }
        }
        other => other,
    })?;
    let out_dir = common.out.clone().or_else(|| exp.output_dir.clone()).unwrap_or_else(|| PathBuf::from("drstrat-out"));
    let threads = match common.threads {
        Some(0) => return Err(CliError::Usage("--threads must be positive".into())),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;

    let mut extra = serde_json::Map::new();
    let outputs: Outputs = match &cli.command {
        Command::Solve { method, .. } => {
            let method = Method::from(*method);
            extra.insert("method".into(), method.tag().into());
            pool.install(|| commands::solve(&exp, method))?
        }
        Command::Evaluate { allocation, .. } => {
            let counts = commands::read_allocation(allocation, &exp)?;
            extra.insert("allocation".into(), allocation_record(allocation, &counts));
            pool.install(|| commands::evaluate(&exp, &counts))?
        }
        Command::Replicate { allocation, replications, .. } => {
            if *replications < 2 {
                return Err(CliError::Usage(format!("--replications must be at least 2, got {replications}")));
            }
            let counts = commands::read_allocation(allocation, &exp)?;
            extra.insert("allocation".into(), allocation_record(allocation, &counts));
            extra.insert("replications".into(), (*replications).into());
            pool.install(|| commands::replicate(&exp, &counts, *replications))?
        }
        Command::Compare { .. } => pool.install(|| commands::compare(&exp))?,
    };

    let mut manifest = serde_json::json!({
        "command": cli.command.name(),
        "config_path": common.config.display().to_string(),
        "config_sha256": sha256_hex(source.as_bytes()),
        "seed": exp.seed,
        "threads": threads,
        "version": env!("CARGO_PKG_VERSION"),
        "outputs": outputs
            .names()
            .iter()
            .map(|n| (n.clone(), serde_json::Value::from(sha256_hex(outputs.get(n).unwrap_or_default()))))
            .collect::<serde_json::Map<_, _>>(),
    });
    manifest.as_object_mut().expect("object").extend(extra);
    manifest["wall_time_seconds"] = started.elapsed().as_secs_f64().into();
    let mut all = outputs;
    all.add_json("manifest.json", &manifest)?;
    all.write_all(&out_dir)?;
    Ok(out_dir)
}

fn allocation_record(path: &Path, counts: &[u64]) -> serde_json::Value {
    serde_json::json!({ "path": path.display().to_string(), "counts": counts })
}

/// Log level for `--verbose`.
pub fn log_level(cli: &Cli) -> log::LevelFilter {
    if cli.command.common().verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Warn
    }
}
