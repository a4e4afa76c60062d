//! Session runtimes and the agent-side session table.
//!
//! [`MockRuntime`] serves a static placeholder page on the session port so
//! the whole pipeline runs without a container engine; [`ContainerRuntime`]
//! drives a docker-compatible CLI. [`SessionManager`] owns capacity, port
//! allocation and the local journal entries for both.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::api::ResultOutcome;
use crate::ids::Id;

use super::journal::{AgentJournal, JournalEvent};
use super::{exec, Pace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuntimeKind {
    Mock,
    Container,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LocalState {
    Pulling,
    Running,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSession {
    pub session_id: Id,
    pub image_ref: String,
    pub state: LocalState,
    pub access_port: u16,
    pub access_url: String,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RuntimeError {
    #[error("session capacity reached")]
    Capacity,
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
    #[error("port {0} is in use")]
    PortConflict(u16),
    #[error("session not found")]
    NotFound,
    #[error("runtime failure: {0}")]
    Failed(String),
}

impl RuntimeError {
    pub fn code(&self) -> &'static str {
        match self {
            RuntimeError::Capacity => "CAPACITY",
            RuntimeError::ImageUnavailable(_) => "IMAGE_UNAVAILABLE",
            RuntimeError::PortConflict(_) => "PORT_CONFLICT",
            RuntimeError::NotFound => "NOT_FOUND",
            RuntimeError::Failed(_) => "DEPLOY_FAILED",
        }
    }
}

/// Launches and terminates the process or container behind one session.
#[async_trait]
pub trait SessionRuntime: Send + Sync {
    fn kind(&self) -> RuntimeKind;
    /// Starts serving `image_ref` on `port`. Must return
    /// [`RuntimeError::PortConflict`] when the port cannot be bound.
    async fn launch(&self, session_id: &Id, image_ref: &str, port: u16) -> Result<(), RuntimeError>;
    /// Stops the session. Stopping something already gone succeeds.
    async fn terminate(&self, session_id: &Id, port: u16) -> Result<(), RuntimeError>;
}

/// Placeholder server standing in for the remote-desktop endpoint.
pub struct MockRuntime {
    bind_host: String,
    deploy_time: Duration,
    pace: Pace,
    servers: Mutex<HashMap<Id, JoinHandle<()>>>,
}

impl MockRuntime {
    pub fn new(bind_host: &str, deploy_time: Duration, pace: Pace) -> Self {
        MockRuntime {
            bind_host: bind_host.to_string(),
            deploy_time,
            pace,
            servers: Mutex::new(HashMap::new()),
        }
    }
}

fn placeholder_page(session_id: &Id, image_ref: &str) -> String {
    format!(
        "<!doctype html><html><head><title>fedplane session {session_id}</title></head>\
         <body><h1>Session {session_id}</h1><p>Placeholder endpoint for image <code>{}</code>.</p></body></html>",
        image_ref.replace('<', "&lt;").replace('>', "&gt;")
    )
}

async fn serve_placeholder(listener: TcpListener, page: Arc<str>) {
    loop {
        let Ok((mut stream, _)) = listener.accept().await else { continue };
        let page = page.clone();
        tokio::spawn(async move {
            let mut buf = [0u8; 2048];
            let mut seen = Vec::new();
            // Read until the end of the request head (or the peer stops).
            while !seen.windows(4).any(|w| w == b"\r\n\r\n") && seen.len() < 16 * 1024 {
                match tokio::time::timeout(Duration::from_secs(5), stream.read(&mut buf)).await {
                    Ok(Ok(n)) if n > 0 => seen.extend_from_slice(&buf[..n]),
                    _ => break,
                }
            }
            let head = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: text/html; charset=utf-8\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                page.len()
            );
            let _ = stream.write_all(head.as_bytes()).await;
            let _ = stream.write_all(page.as_bytes()).await;
            let _ = stream.shutdown().await;
        });
    }
}

#[async_trait]
impl SessionRuntime for MockRuntime {
    fn kind(&self) -> RuntimeKind {
        RuntimeKind::Mock
    }

    async fn launch(&self, session_id: &Id, image_ref: &str, port: u16) -> Result<(), RuntimeError> {
        let listener = TcpListener::bind((self.bind_host.as_str(), port))
            .await
            .map_err(|_| RuntimeError::PortConflict(port))?;
        if !self.deploy_time.is_zero() {
            self.pace.sleep(self.deploy_time).await;
        }
        let page: Arc<str> = placeholder_page(session_id, image_ref).into();
        let handle = tokio::spawn(serve_placeholder(listener, page));
        let old = self.servers.lock().insert(session_id.clone(), handle);
        if let Some(old) = old {
            old.abort();
        }
        Ok(())
    }

    async fn terminate(&self, session_id: &Id, _port: u16) -> Result<(), RuntimeError> {
        let handle = self.servers.lock().remove(session_id);
        if let Some(handle) = handle {
            handle.abort();
            let _ = handle.await;
        }
        Ok(())
    }
}

/// Drives `docker` (or a compatible CLI such as `podman`).
pub struct ContainerRuntime {
    cli: String,
    container_port: u16,
}

impl ContainerRuntime {
    pub fn new(cli: &str, container_port: u16) -> Self {
        ContainerRuntime {
            cli: cli.to_string(),
            container_port,
        }
    }

    pub fn container_name(session_id: &Id) -> String {
        format!("fedplane-{}", session_id.as_str().to_ascii_lowercase())
    }

    /// Arguments of the launch invocation, without the CLI name.
    pub fn run_args(&self, session_id: &Id, image_ref: &str, port: u16) -> Vec<String> {
        vec![
            "run".into(),
            "-d".into(),
            "--rm".into(),
            "--name".into(),
            Self::container_name(session_id),
            "-p".into(),
            format!("{port}:{}", self.container_port),
            image_ref.into(),
        ]
    }

    async fn cli(&self, args: Vec<String>, timeout: Duration) -> exec::ExecResult {
        let mut argv = vec![self.cli.clone()];
        argv.extend(args);
        exec::run(&argv, timeout, 16 * 1024).await
    }
}

fn classify_launch_failure(output: &str, port: u16) -> RuntimeError {
    let lower = output.to_ascii_lowercase();
    if lower.contains("port is already allocated") || lower.contains("address already in use") {
        RuntimeError::PortConflict(port)
    } else if lower.contains("unable to find image")
        || lower.contains("pull access denied")
        || lower.contains("manifest unknown")
        || lower.contains("not found")
    {
        RuntimeError::ImageUnavailable(output.trim().to_string())
    } else {
        RuntimeError::Failed(output.trim().to_string())
    }
}

#[async_trait]
impl SessionRuntime for ContainerRuntime {
    fn kind(&self) -> RuntimeKind {
        RuntimeKind::Container
    }

    async fn launch(&self, session_id: &Id, image_ref: &str, port: u16) -> Result<(), RuntimeError> {
        let r = self.cli(self.run_args(session_id, image_ref, port), Duration::from_secs(600)).await;
        match (r.outcome, r.exit_status) {
            (ResultOutcome::Exited, Some(0)) => Ok(()),
            (ResultOutcome::SpawnFailed, _) => Err(RuntimeError::Failed(r.output)),
            _ => {
                // A half-created container would hold the name.
                let _ = self
                    .cli(vec!["rm".into(), "-f".into(), Self::container_name(session_id)], Duration::from_secs(60))
                    .await;
                Err(classify_launch_failure(&r.output, port))
            }
        }
    }

    async fn terminate(&self, session_id: &Id, _port: u16) -> Result<(), RuntimeError> {
        let r = self
            .cli(vec!["rm".into(), "-f".into(), Self::container_name(session_id)], Duration::from_secs(60))
            .await;
        match (r.outcome, r.exit_status) {
            (ResultOutcome::Exited, Some(0)) => Ok(()),
            _ if r.output.to_ascii_lowercase().contains("no such container") => Ok(()),
            _ => Err(RuntimeError::Failed(r.output)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionLimits {
    pub max_concurrent: usize,
    pub port_range: (u16, u16),
    /// Host placed in access URLs.
    pub public_host: String,
}

/// The agent's session table. Keeps RUNNING sessions and bound ports in
/// one-to-one correspondence.
pub struct SessionManager {
    runtime: Arc<dyn SessionRuntime>,
    limits: SessionLimits,
    sessions: BTreeMap<Id, LocalSession>,
}

impl SessionManager {
    pub fn new(runtime: Arc<dyn SessionRuntime>, limits: SessionLimits) -> Self {
        SessionManager {
            runtime,
            limits,
            sessions: BTreeMap::new(),
        }
    }

    pub fn sessions(&self) -> impl Iterator<Item = &LocalSession> {
        self.sessions.values()
    }

    pub fn running_ids(&self) -> Vec<Id> {
        self.sessions
            .values()
            .filter(|s| s.state == LocalState::Running)
            .map(|s| s.session_id.clone())
            .collect()
    }

    fn running_count(&self) -> usize {
        self.sessions.values().filter(|s| s.state == LocalState::Running).count()
    }

    fn port_taken(&self, port: u16) -> bool {
        self.sessions
            .values()
            .any(|s| s.access_port == port && s.state == LocalState::Running)
    }

    fn url(&self, port: u16) -> String {
        format!("http://{}:{port}/", self.limits.public_host)
    }

    /// Re-establishes sessions recorded as RUNNING before a restart.
    pub async fn recover(&mut self, recorded: Vec<LocalSession>, journal: &mut AgentJournal) {
        for mut s in recorded {
            if s.state != LocalState::Running {
                continue;
            }
            if self.runtime.kind() == RuntimeKind::Mock {
                // The placeholder server died with the old process.
                if let Err(err) = self.runtime.launch(&s.session_id, &s.image_ref, s.access_port).await {
                    tracing::warn!(session_id = %s.session_id, %err, "could not restore session");
                    s.state = LocalState::Failed;
                    journal.append(&JournalEvent::SessionStopped {
                        session_id: s.session_id.clone(),
                        state: LocalState::Failed,
                    });
                }
            }
            self.sessions.insert(s.session_id.clone(), s);
        }
    }

    pub async fn start(
        &mut self,
        session_id: &Id,
        image_ref: &str,
        port_hint: Option<u16>,
        now: DateTime<Utc>,
        journal: &mut AgentJournal,
    ) -> Result<LocalSession, RuntimeError> {
        if let Some(existing) = self.sessions.get(session_id).filter(|s| s.state == LocalState::Running) {
            return Ok(existing.clone());
        }
        if self.running_count() >= self.limits.max_concurrent {
            return Err(RuntimeError::Capacity);
        }
        let (lo, hi) = self.limits.port_range;
        let first = port_hint.filter(|p| (lo..=hi).contains(p)).unwrap_or(lo);
        let span = u32::from(hi - lo) + 1;
        let mut last_err = RuntimeError::PortConflict(first);
        for i in 0..span {
            let port = lo + ((u32::from(first - lo) + i) % span) as u16;
            if self.port_taken(port) {
                continue;
            }
            match self.runtime.launch(session_id, image_ref, port).await {
                Ok(()) => {
                    let session = LocalSession {
                        session_id: session_id.clone(),
                        image_ref: image_ref.to_string(),
                        state: LocalState::Running,
                        access_port: port,
                        access_url: self.url(port),
                        started_at: now,
                    };
                    journal.append(&JournalEvent::SessionStarted(session.clone()));
                    self.sessions.insert(session_id.clone(), session.clone());
                    return Ok(session);
                }
                Err(RuntimeError::PortConflict(p)) => last_err = RuntimeError::PortConflict(p),
                Err(other) => return Err(other),
            }
        }
        Err(last_err)
    }

    /// Stops a session; stopping an unknown or stopped session succeeds.
    pub async fn stop(&mut self, session_id: &Id, journal: &mut AgentJournal) -> Result<(), RuntimeError> {
        let Some(session) = self.sessions.get_mut(session_id) else {
            return Ok(());
        };
        if session.state != LocalState::Running {
            return Ok(());
        }
        self.runtime.terminate(session_id, session.access_port).await?;
        session.state = LocalState::Stopped;
        journal.append(&JournalEvent::SessionStopped {
            session_id: session_id.clone(),
            state: LocalState::Stopped,
        });
        Ok(())
    }

    /// Stops every running session (agent shutdown).
    pub async fn stop_all(&mut self, journal: &mut AgentJournal) {
        for id in self.running_ids() {
            if let Err(err) = self.stop(&id, journal).await {
                tracing::warn!(session_id = %id, %err, "stop failed");
            }
        }
    }
}
