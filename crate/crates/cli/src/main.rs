//! `pertbench` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Core(pertbench::Error),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Config(_) => "E_CONFIG",
            CliError::Core(e) => e.code(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) | CliError::Config(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

impl From<pertbench::Error> for CliError {
    fn from(e: pertbench::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "pertbench",
    version,
    about = "Perturbation-response prediction benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Normalize counts, select genes and write observed aggregates.
    Preprocess,
    /// Write a train/val/test assignment.
    Split,
    /// Train a baseline model.
    Train,
    /// Predict aggregates for one split label.
    Predict,
    /// Score predictions against observations.
    Evaluate,
    /// Collapse diagnostics only.
    Diagnose,
    /// Random hyperparameter search.
    Hpo,
    /// Draw a synthetic dataset with exact ground truth.
    Simulate,
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.load_file(p)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(o) = &common.out {
        cfg.set("out", &o.display().to_string())?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(t) = common.threads {
        cfg.set("threads", &t.to_string())?;
    }
    Ok(cfg)
}

/// Moves every entry of `staging` into `out`, replacing same-named entries.
fn publish(staging: &Path, out: &Path) -> Result<(), CliError> {
    let io = |p: &Path, e| CliError::Core(pertbench::Error::io(p, e));
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    for entry in std::fs::read_dir(staging).map_err(|e| io(staging, e))? {
        let entry = entry.map_err(|e| io(staging, e))?;
        let dest = out.join(entry.file_name());
        if dest.is_dir() {
            std::fs::remove_dir_all(&dest).map_err(|e| io(&dest, e))?;
        }
        std::fs::rename(entry.path(), &dest).map_err(|e| io(&dest, e))?;
    }
    std::fs::remove_dir(staging).map_err(|e| io(staging, e))
}

fn run(command: Command, cfg: &RunConfig) -> Result<(), CliError> {
    let threads: usize = cfg.parse("threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let out = cfg.out()?;
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let staging = out.with_file_name(format!(".{name}.partial-{}", std::process::id()));
    std::fs::create_dir_all(&staging)
        .map_err(|e| CliError::Core(pertbench::Error::io(&staging, e)))?;

    let result = (|| {
        std::fs::write(staging.join(RESOLVED_CONFIG_FILE), cfg.resolved_text())
            .map_err(|e| CliError::Core(pertbench::Error::io(&staging, e)))?;
        match command {
            Command::Preprocess => commands::preprocess(cfg, &staging),
            Command::Split => commands::split(cfg, &staging),
            Command::Train => commands::train(cfg, &staging),
            Command::Predict => commands::predict(cfg, &staging),
            Command::Evaluate => commands::evaluate_cmd(cfg, &staging),
            Command::Diagnose => commands::diagnose(cfg, &staging),
            Command::Hpo => commands::hpo(cfg, &staging),
            Command::Simulate => commands::simulate(cfg, &staging),
        }?;
        publish(&staging, &out)
    })();
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&staging);
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", first.trim_start_matches("error: "));
            return ExitCode::FAILURE;
        }
    };
    match resolve(&cli.common).and_then(|cfg| run(cli.command, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.message());
            ExitCode::FAILURE
        }
    }
}
