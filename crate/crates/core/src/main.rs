use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tapered_ion_engine::config::{ScenarioConfig, ScenarioKind};
use tapered_ion_engine::error::EngineError;
use tapered_ion_engine::scenario::{self, CODE_VERSION};

#[derive(Parser)]
#[command(name = "ion-engine", about = "Single-ion tapered-trap heat engine simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its CSV outputs and manifest.json.
    Run {
        config: PathBuf,
        /// Overrides the scenario named in the config.
        #[arg(long)]
        scenario: Option<String>,
        /// Overrides the output directory of the config (default: out/<scenario>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a config without running any dynamics.
    Validate { config: PathBuf },
    Version,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Version => {
            println!("ion-engine {CODE_VERSION}");
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            let cfg = match ScenarioConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let report = cfg.validate();
            print!("{report}");
            if report.ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CONFIG)
            }
        }
        Command::Run { config, scenario, out, threads } => run(config, scenario, out, threads),
    }
}

fn run(config: PathBuf, scenario: Option<String>, out: Option<PathBuf>, threads: Option<usize>) -> ExitCode {
    let mut cfg = match ScenarioConfig::load(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(name) = scenario {
        match name.parse::<ScenarioKind>() {
            Ok(k) => cfg.scenario = k,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        }
    }
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.scenario.name()));
    match scenario::run(&cfg, &dir) {
        Ok(manifest) => {
            for inv in manifest.invariants.iter().filter(|i| i.status != tapered_ion_engine::config::CheckStatus::Pass) {
                eprintln!("{:?}: {} ({})", inv.status, inv.name, inv.detail);
            }
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(e) = &manifest.error {
                eprintln!("error: {e}");
            }
            println!("{} files written to {}", manifest.files.len() + 1, dir.display());
            if manifest.hard_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
        Err(e @ EngineError::Config(_)) | Err(e @ EngineError::InvalidParameter { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
