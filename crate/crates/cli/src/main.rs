//! `jumpsmp <kind> --config run.toml [--seed N] [--paths N] [--out DIR] [--threads N]`
//!
//! Exit status: 0 when every check passes, 1 when a check fails or a stage
//! errors, 2 for configuration problems.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use jumpsmp::runner::{parse_config, run_experiment, write_report, ExperimentConfig, ExperimentKind};
use jumpsmp::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    ValidateNoise,
    DissectCheck,
    DerivativeOracle,
    Duality,
    Representation,
    AdjointCheck,
    Criticality,
    Optimize,
    CreditBenchmark,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::ValidateNoise => ExperimentKind::ValidateNoise,
            Kind::DissectCheck => ExperimentKind::DissectCheck,
            Kind::DerivativeOracle => ExperimentKind::DerivativeOracle,
            Kind::Duality => ExperimentKind::Duality,
            Kind::Representation => ExperimentKind::Representation,
            Kind::AdjointCheck => ExperimentKind::AdjointCheck,
            Kind::Criticality => ExperimentKind::Criticality,
            Kind::Optimize => ExperimentKind::Optimize,
            Kind::CreditBenchmark => ExperimentKind::CreditBenchmark,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "jumpsmp",
    version,
    about = "Run a maximum-principle experiment and write its report"
)]
struct Cli {
    /// Experiment kind; must match `kind` in the config file when both are given.
    #[arg(value_enum)]
    kind: Kind,
    /// TOML config. Without it the kind's defaults are used and `--seed` is required.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    /// Output directory for summary.json, report.txt and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let kind = ExperimentKind::from(cli.kind);
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let mut config = toml_with_kind(&text, kind)?;
            if config.kind != kind {
                return Err(Failure::Config(format!(
                    "config is for `{}` but the subcommand is `{kind}`",
                    config.kind
                )));
            }
            config.seed = cli.seed.unwrap_or(config.seed);
            config
        }
        None => {
            let seed = cli
                .seed
                .ok_or_else(|| Failure::Config("a seed is required: pass --seed or a config with `seed`".into()))?;
            ExperimentConfig::new(kind, seed)
        }
    };
    if let Some(p) = cli.paths {
        config.paths = p;
    }
    if let Some(t) = cli.threads {
        config.threads = Some(t);
    }
    if let Some(o) = &cli.out {
        config.output.dir = Some(o.clone());
    }
    config.validate()?;
    Ok(config)
}

/// Parses a config, supplying `kind` from the subcommand when the file omits it.
fn toml_with_kind(text: &str, kind: ExperimentKind) -> Result<ExperimentConfig, Failure> {
    match parse_config(text) {
        Ok(c) => Ok(c),
        Err(Error::Config(msg)) if msg.contains("missing field `kind`") => {
            Ok(parse_config(&format!("kind = \"{kind}\"\n{text}"))?)
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load(&cli) {
        Ok(c) => c,
        Err(Failure::Config(msg)) | Err(Failure::Run(msg)) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(2);
        }
    };
    let report = match run_experiment(&config) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_config() { 2 } else { 1 });
        }
    };
    let dir = config
        .output
        .dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(config.kind.name()));
    if let Err(e) = write_report(&report, &dir) {
        eprintln!("error: writing the report to {}: {e}", dir.display());
        return ExitCode::from(1);
    }
    print!("{}", report.table());
    println!("report written to {}", dir.display());
    ExitCode::from(report.exit_code() as u8)
}
