//! Command-line front end: `run`, `gen-data`, `report`, `validate`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::datagen;
use crate::error::{Error, Result};
use crate::experiments::{self, report, ExperimentConfig};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "CFLAG_OUT_ROOT";

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INCOMPLETE_TRACE: i32 = 2;
pub const EXIT_INVALID_CONFIG: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cflag", version, about = "Continual federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute a JSON config and write the run artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $CFLAG_OUT_ROOT/<config>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for per-round client work.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write every task's client shards and test split as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute metrics from a run directory and write plot data.
    Report {
        /// Run directory holding trace.csv.
        run_dir: PathBuf,
        /// Where to write the plot files (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_out(config: &Path, seed: u64) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    root.join(format!("{stem}-seed{seed}"))
}

fn execute(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Run { config, out, seed, threads } => {
            let cfg = load(&config, seed)?;
            let dir = out.unwrap_or_else(|| default_out(&config, cfg.seed));
            let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            if threads == 0 {
                return Err(Error::Config("--threads must be at least 1".into()));
            }
            let artifacts = experiments::with_threads(threads, || experiments::run_to_dir(&cfg, &dir))??;
            Ok(json!({ "out": dir, "summary": artifacts.summary }))
        }
        Command::GenData { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let prep = experiments::prepare(&cfg)?;
            let mut files = Vec::new();
            for (s, shards) in prep.shards.iter().enumerate() {
                files.extend(datagen::export_shards(&out, s, shards)?);
                let test = out.join(format!("test_task{s}.csv"));
                datagen::write_csv(&test, &prep.test[s])?;
                files.push(test);
            }
            Ok(json!({ "out": out, "files": files.len() }))
        }
        Command::Report { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.clone());
            Ok(serde_json::to_value(report::report(&run_dir, &out)?)?)
        }
        Command::Validate { config, seed } => {
            let cfg = load(&config, seed)?;
            let prep = experiments::prepare(&cfg)?;
            Ok(json!({ "valid": true, "smoothness": prep.smoothness, "param_dim": prep.model.param_dim() }))
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::IncompleteTrace(_) => EXIT_INCOMPLETE_TRACE,
        Error::Config(_) => EXIT_INVALID_CONFIG,
        _ => EXIT_FAILURE,
    }
}

/// Runs the CLI and returns the process exit code. Results go to stdout as
/// JSON; failures go to stderr as `{"error": kind, "message": text}`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return EXIT_FAILURE;
        }
    };
    match execute(cli.command) {
        Ok(value) => {
            println!("{value}");
            0
        }
        Err(err) => {
            eprintln!("{}", json!({ "error": err.kind(), "message": err.to_string() }));
            exit_code(&err)
        }
    }
}
