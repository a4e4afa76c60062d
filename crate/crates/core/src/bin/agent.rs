//! Edge agent. Exit status: 0 ok, 1 I/O, 2 activation rejected,
//! 3 configuration error, 4 server unreachable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use fedplane::agent::transport::{HttpTransport, Transport};
use fedplane::agent::{enroll_flow, Agent, AgentConfig, AgentError, Grant, Pace};

#[derive(Parser)]
#[command(name = "fedplane-agent", version, about = "Testbed node agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enroll with a one-time activation pair and write the grant.
    Enroll {
        #[arg(long)]
        server_url: String,
        #[arg(long)]
        activation_id: String,
        #[arg(long)]
        activation_code: String,
        /// Agent configuration file, created if absent.
        #[arg(long, default_value = "agent.toml")]
        config: PathBuf,
    },
    /// Heartbeat, run commands and host sessions until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Start-up time simulated by the MOCK runtime.
        #[arg(long, default_value_t = 0)]
        mock_deploy_ms: u64,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fedplane-agent: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load(path: &Path) -> Result<AgentConfig, AgentError> {
    let mut cfg = if path.exists() { AgentConfig::load(path)? } else { AgentConfig::default() };
    cfg.apply_env(std::env::vars())?;
    Ok(cfg)
}

async fn run(cli: Cli) -> Result<(), AgentError> {
    match cli.command {
        Command::Enroll {
            server_url,
            activation_id,
            activation_code,
            config,
        } => {
            let mut cfg = load(&config)?;
            cfg.server_url = server_url;
            cfg.activation_id = Some(activation_id);
            cfg.activation_code = Some(activation_code);
            cfg.validate()?;
            let transport = HttpTransport::new(&cfg.server_url);
            let grant = enroll_flow(&mut cfg, Some(&config), &transport, &Pace::Real).await?;
            println!("{}", grant.node_id);
            Ok(())
        }
        Command::Run { config, mock_deploy_ms } => {
            let mut cfg = load(&config)?;
            cfg.validate()?;
            let transport: Arc<dyn Transport> = Arc::new(HttpTransport::new(&cfg.server_url));
            let grant_path = cfg.grant_path_for(Some(&config));
            let grant = if grant_path.exists() {
                Grant::load(&grant_path)?
            } else if cfg.activation_id.is_some() {
                enroll_flow(&mut cfg, Some(&config), transport.as_ref(), &Pace::Real).await?
            } else {
                return Err(AgentError::Config(format!(
                    "no grant at {} and no activation pair configured; run `enroll` first",
                    grant_path.display()
                )));
            };
            let runtime = cfg.build_runtime(Pace::Real, Duration::from_millis(mock_deploy_ms));
            let journal = cfg.journal_path_for(Some(&config));
            let agent = Agent::start(cfg, grant, transport, runtime, Some(&journal), Pace::Real).await?;
            tracing::info!(node_id = %agent.node_id(), "agent running");
            agent.run(shutdown_signal()).await
        }
    }
}

async fn shutdown_signal() {
    let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}
