//! Control-plane server: the /v1 API, agent endpoints, static UI and the
//! periodic sweeper.

use std::io::BufRead;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use fedplane::context::Role;
use fedplane::gateway::http::bind;
use fedplane::gateway::Gateway;
use fedplane::{ControlPlane, PlaneConfig};

#[derive(Parser)]
#[command(name = "fedplane-server", version, about = "Testbed federation control plane")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, env = "FEDPLANE_CONFIG")]
    config: Option<PathBuf>,
    /// Listen address, overriding the configuration.
    #[arg(long)]
    listen: Option<String>,
    /// Journal file, overriding the configuration.
    #[arg(long)]
    db_path: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the API (the default).
    Serve,
    /// Create an account. The credential is read from the first line of stdin.
    AddUser {
        #[arg(long)]
        username: String,
        /// EXPERIMENTER, OWNER or ADMIN.
        #[arg(long, default_value = "EXPERIMENTER")]
        role: String,
    },
}

fn load_config(cli: &Cli) -> fedplane::Result<PlaneConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PlaneConfig::load(p)?,
        None => PlaneConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(l) = &cli.listen {
        cfg.listen = l.clone();
    }
    if let Some(p) = &cli.db_path {
        cfg.db_path = Some(p.clone());
    }
    Ok(cfg)
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("fedplane-server: {err}");
            ExitCode::FAILURE
        }
    }
}

async fn run(cli: Cli) -> fedplane::Result<()> {
    let cfg = load_config(&cli)?;
    let plane = Arc::new(ControlPlane::builder(cfg).build()?);
    match cli.command.unwrap_or(Command::Serve) {
        Command::AddUser { username, role } => {
            let role = Role::parse(&role)
                .ok_or_else(|| fedplane::Error::new(fedplane::ErrorCode::Validation, format!("unknown role {role:?}")))?;
            let mut line = String::new();
            std::io::stdin()
                .lock()
                .read_line(&mut line)
                .map_err(|e| fedplane::Error::new(fedplane::ErrorCode::Validation, e.to_string()))?;
            let user = plane.auth().create_user(&username, line.trim_end_matches(['\r', '\n']), role)?;
            println!("{}", user.user_id);
            Ok(())
        }
        Command::Serve => {
            let gateway = Gateway::new(plane.clone());
            let listen = plane.config().listen.clone();
            let server = bind(gateway, &listen)
                .await
                .map_err(|e| fedplane::Error::new(fedplane::ErrorCode::Internal, format!("bind {listen}: {e}")))?;
            tracing::info!(addr = %server.addr, "serving");
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
            server.shutdown().await;
            Ok(())
        }
    }
}
