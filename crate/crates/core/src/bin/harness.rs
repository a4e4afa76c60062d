//! Scenario runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedplane::harness::{render, run_scenario_report, ReportFormat, ScenarioSpec};

#[derive(Parser)]
#[command(name = "harness", version, about = "Run federation scenarios against an in-process control plane")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write the report.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// table, csv or json.
        #[arg(long, default_value = "table")]
        format: String,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let Command::Run { spec, out, format } = Cli::parse().command;
    match run(&spec, out.as_deref(), &format).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("harness: {err}");
            ExitCode::from(2)
        }
    }
}

async fn run(spec_path: &std::path::Path, out: Option<&std::path::Path>, format: &str) -> fedplane::Result<bool> {
    let format: ReportFormat = format.parse()?;
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| fedplane::Error::new(fedplane::ErrorCode::Validation, format!("{}: {e}", spec_path.display())))?;
    let spec = ScenarioSpec::from_toml(&text)?;
    let report = run_scenario_report(&spec).await?;
    let rendered = render(&report, format)?;
    match out {
        Some(path) => std::fs::write(path, rendered)
            .map_err(|e| fedplane::Error::new(fedplane::ErrorCode::Storage, format!("{}: {e}", path.display())))?,
        None => print!("{rendered}"),
    }
    if let Some(failed) = report.first_failure() {
        eprintln!("harness: check {} failed: {}", failed.name, failed.detail);
    }
    Ok(report.passed())
}
