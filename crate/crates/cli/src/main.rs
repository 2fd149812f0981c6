#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use obstacle_core::scenarios::{catalog_filtered, format_catalog};

mod config;
mod pipeline;

use config::RunConfig;
use pipeline::CliError;

/// Numerical laboratory for the obstacle problem: solve, classify, and
/// measure coincidence-set geometry.
#[derive(Parser)]
#[command(name = "obstacle-lab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scenario catalog.
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
    /// Solve every configured grid and run the requested diagnostics.
    Run { config: PathBuf },
    /// Run the diagnostics on a field snapshot without solving.
    Analyze { snapshot: PathBuf, config: PathBuf },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// One line per entry: `name dims params has_exact`.
    List {
        /// Restrict the listing, e.g. `dim=2`.
        #[arg(long, value_parser = parse_filter)]
        filter: Option<usize>,
    },
}

fn parse_filter(s: &str) -> Result<usize, String> {
    let (key, value) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    match key.trim() {
        "dim" => value.trim().parse().map_err(|_| format!("dim must be an integer, got `{value}`")),
        other => Err(format!("unknown filter key `{other}`; supported: dim")),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    RunConfig::parse(&text).map_err(CliError::Config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Scenario {
            cmd: ScenarioCmd::List { filter },
        } => {
            print!("{}", format_catalog(&catalog_filtered(filter)));
            return ExitCode::SUCCESS;
        }
        Cmd::Run { config } => load_config(&config).and_then(|c| pipeline::run(&c)),
        Cmd::Analyze { snapshot, config } => load_config(&config).and_then(|c| pipeline::analyze(&snapshot, &c)),
    };
    match result {
        Ok(status) => {
            match status {
                pipeline::Status::Ok => {}
                pipeline::Status::NotConverged => eprintln!("error: at least one solve did not converge; see report.json"),
                pipeline::Status::Degenerate => eprintln!("error: diagnostic failures; see `failures` in report.json"),
            }
            ExitCode::from(status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
