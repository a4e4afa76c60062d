//! The edge agent deployed on each control interface.
//!
//! An agent enrolls once with its activation pair, persists the returned
//! grant, and from then on polls the control plane: each heartbeat carries
//! host metrics and returns pending commands. Commands are deduplicated by
//! ID, executed (shell commands, session start/stop) and their results are
//! kept in a journaled outbox until the server acknowledges them.

pub mod exec;
pub mod journal;
pub mod metrics;
pub mod runtime;
pub mod transport;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

use crate::api::{CommandEnvelope, EnrollRequest, HeartbeatRequest, ResultOutcome, ResultRequest};
use crate::clock::{Clock, ManualClock};
use crate::federation::{CommandAction, Liveness};
use crate::ids::Id;

use self::journal::{AgentJournal, JournalEvent};
use self::metrics::MetricsSampler;
use self::runtime::{ContainerRuntime, MockRuntime, RuntimeKind, SessionLimits, SessionManager, SessionRuntime};
use self::transport::{Transport, TransportError};

/// How the agent waits: real sleeps, or advancing a shared manual clock.
#[derive(Debug, Clone)]
pub enum Pace {
    Real,
    Virtual(ManualClock),
}

impl Pace {
    pub async fn sleep(&self, d: Duration) {
        match self {
            Pace::Real => tokio::time::sleep(d).await,
            Pace::Virtual(clock) => clock.advance(chrono::Duration::from_std(d).unwrap_or(chrono::Duration::MAX)),
        }
    }

    pub fn now(&self) -> chrono::DateTime<chrono::Utc> {
        match self {
            Pace::Real => chrono::Utc::now(),
            Pace::Virtual(clock) => clock.now(),
        }
    }
}

pub const ENV_PREFIX: &str = "FEDPLANE_AGENT_";

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub server_url: String,
    /// Enrollment pair; erased from the file after the first enrollment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation_code: Option<String>,
    /// Where the grant (node ID and bearer token) is stored.
    /// Defaults to `grant.json` beside the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grant_path: Option<PathBuf>,
    /// Directory of the local journal. Defaults to the config directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_dir: Option<PathBuf>,
    /// Where staged artifacts are written, one subdirectory per artifact.
    /// Defaults to `staged/` under the state directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub staging_dir: Option<PathBuf>,
    pub heartbeat_interval_s: u64,
    pub runtime: RuntimeKind,
    pub max_concurrent_sessions: usize,
    pub port_range_start: u16,
    pub port_range_end: u16,
    /// Address placeholder servers bind to.
    pub bind_host: String,
    /// Host name put into access URLs.
    pub public_host: String,
    pub container_cli: String,
    /// Port the session container listens on internally.
    pub container_port: u16,
    pub output_cap: usize,
    pub enroll_attempts: u32,
    pub retry_base_ms: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            server_url: "http://127.0.0.1:8080".into(),
            activation_id: None,
            activation_code: None,
            grant_path: None,
            state_dir: None,
            staging_dir: None,
            heartbeat_interval_s: 5,
            runtime: RuntimeKind::Container,
            max_concurrent_sessions: 1,
            port_range_start: 36000,
            port_range_end: 36999,
            bind_host: "0.0.0.0".into(),
            public_host: "127.0.0.1".into(),
            container_cli: "docker".into(),
            container_port: 6080,
            output_cap: 64 * 1024,
            enroll_attempts: 5,
            retry_base_ms: 500,
        }
    }
}

impl std::fmt::Debug for AgentConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentConfig")
            .field("server_url", &self.server_url)
            .field("activation_id", &self.activation_id)
            .field("activation_code", &self.activation_code.as_ref().map(|_| "<redacted>"))
            .field("grant_path", &self.grant_path)
            .field("runtime", &self.runtime)
            .finish_non_exhaustive()
    }
}

impl AgentConfig {
    pub fn from_toml(text: &str) -> Result<Self, AgentError> {
        toml::from_str(text).map_err(|e| AgentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `FEDPLANE_AGENT_<KEY>` overrides.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), AgentError> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| AgentError::Config(e.to_string()))?;
        let mut touched = false;
        for (key, value) in vars {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else { continue };
            let name = name.to_ascii_lowercase();
            let parsed = match table.get(&name) {
                Some(toml::Value::Integer(_)) => value.parse::<i64>().ok().map(toml::Value::Integer),
                Some(toml::Value::Boolean(_)) => value.parse::<bool>().ok().map(toml::Value::Boolean),
                Some(toml::Value::String(_)) if name == "runtime" => Some(toml::Value::String(value.to_ascii_uppercase())),
                _ if matches!(
                    name.as_str(),
                    "server_url" | "activation_id" | "activation_code" | "grant_path" | "state_dir" | "staging_dir" | "bind_host"
                        | "public_host" | "container_cli"
                ) =>
                {
                    Some(toml::Value::String(value.clone()))
                }
                _ => return Err(AgentError::Config(format!("unknown setting {key}"))),
            };
            let parsed = parsed.ok_or_else(|| AgentError::Config(format!("bad value for {key}")))?;
            table.insert(name, parsed);
            touched = true;
        }
        if touched {
            *self = table.try_into().map_err(|e: toml::de::Error| AgentError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.server_url.starts_with("http://") || self.server_url.starts_with("https://")) {
            return Err(AgentError::Config("server_url must be an http(s) URL".into()));
        }
        if self.port_range_start > self.port_range_end {
            return Err(AgentError::Config("port range is empty".into()));
        }
        if self.heartbeat_interval_s == 0 {
            return Err(AgentError::Config("heartbeat_interval_s must be positive".into()));
        }
        Ok(())
    }

    /// Writes the config with owner-only permissions.
    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let text = toml::to_string(self).map_err(|e| AgentError::Config(e.to_string()))?;
        write_private(path, text.as_bytes())
    }

    pub fn grant_path_for(&self, config_path: Option<&Path>) -> PathBuf {
        self.grant_path.clone().unwrap_or_else(|| {
            config_path
                .and_then(Path::parent)
                .unwrap_or_else(|| Path::new("."))
                .join("grant.json")
        })
    }

    pub fn journal_path_for(&self, config_path: Option<&Path>) -> PathBuf {
        self.state_dir
            .clone()
            .or_else(|| config_path.and_then(Path::parent).map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."))
            .join("agent.journal")
    }

    pub fn session_limits(&self) -> SessionLimits {
        SessionLimits {
            max_concurrent: self.max_concurrent_sessions,
            port_range: (self.port_range_start, self.port_range_end),
            public_host: self.public_host.clone(),
        }
    }

    pub fn build_runtime(&self, pace: Pace, mock_deploy: Duration) -> Arc<dyn SessionRuntime> {
        match self.runtime {
            RuntimeKind::Mock => Arc::new(MockRuntime::new(&self.bind_host, mock_deploy, pace)),
            RuntimeKind::Container => Arc::new(ContainerRuntime::new(&self.container_cli, self.container_port)),
        }
    }
}

/// What enrollment leaves on disk.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Grant {
    pub node_id: Id,
    pub agent_token: String,
}

impl std::fmt::Debug for Grant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grant")
            .field("node_id", &self.node_id)
            .field("agent_token", &"<redacted>")
            .finish()
    }
}

impl Grant {
    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let bytes = std::fs::read(path).map_err(|e| AgentError::Config(format!("no grant at {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| AgentError::Config(format!("corrupt grant {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        write_private(path, &serde_json::to_vec_pretty(self).expect("grant serializes"))
    }
}

/// Writes via a 0600 temp file and rename so readers never see a partial
/// file and the content is never world-readable.
fn write_private(path: &Path, bytes: &[u8]) -> Result<(), AgentError> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let io = |e: std::io::Error| AgentError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(&tmp)
        .map_err(io)?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error("activation rejected: {0}")]
    Rejected(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("server unreachable: {0}")]
    Network(String),
    #[error("{0}")]
    Io(String),
}

impl AgentError {
    /// Process exit status for the agent binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            AgentError::Rejected(_) => 2,
            AgentError::Config(_) => 3,
            AgentError::Network(_) => 4,
            AgentError::Io(_) => 1,
        }
    }
}

fn host_facts() -> BTreeMap<String, String> {
    let mut facts = BTreeMap::new();
    facts.insert("os".into(), std::env::consts::OS.into());
    facts.insert("arch".into(), std::env::consts::ARCH.into());
    if let Ok(h) = std::fs::read_to_string("/proc/sys/kernel/hostname") {
        facts.insert("hostname".into(), h.trim().into());
    }
    facts
}

/// Enrolls with the configured activation pair, persists the grant and
/// erases the pair from `cfg` (and from the config file when given).
/// Network failures are retried with exponential backoff.
pub async fn enroll_flow(
    cfg: &mut AgentConfig,
    config_path: Option<&Path>,
    transport: &dyn Transport,
    pace: &Pace,
) -> Result<Grant, AgentError> {
    let (Some(activation_id), Some(activation_code)) = (cfg.activation_id.clone(), cfg.activation_code.clone()) else {
        return Err(AgentError::Config("activation_id and activation_code are required to enroll".into()));
    };
    let req = EnrollRequest {
        activation_id,
        activation_code,
        agent_version: crate::VERSION.into(),
        host_facts: host_facts(),
    };
    let attempts = cfg.enroll_attempts.max(1);
    let mut last = String::new();
    let mut grant = None;
    for attempt in 0..attempts {
        if attempt > 0 {
            let backoff = cfg.retry_base_ms.saturating_mul(1 << (attempt - 1).min(16));
            tracing::info!(attempt, backoff_ms = backoff, "retrying enrollment");
            pace.sleep(Duration::from_millis(backoff)).await;
        }
        match transport.enroll(&req).await {
            Ok(g) => {
                grant = Some(g);
                break;
            }
            Err(TransportError::Network(e)) => last = e,
            Err(TransportError::Api(e)) if e.code == "REJECTED" => {
                return Err(AgentError::Rejected(
                    "the activation pair is invalid, expired or already used; ask the testbed owner for a fresh deployment script".into(),
                ))
            }
            Err(TransportError::Api(e)) => last = format!("{}: {}", e.code, e.message),
        }
    }
    let Some(g) = grant else {
        return Err(AgentError::Network(last));
    };
    let grant = Grant {
        node_id: g.node_id,
        agent_token: g.agent_token,
    };
    if let Some(path) = config_path {
        grant.save(&cfg.grant_path_for(Some(path)))?;
    } else if let Some(path) = &cfg.grant_path {
        grant.save(path)?;
    }
    cfg.activation_id = None;
    cfg.activation_code = None;
    if let Some(path) = config_path {
        cfg.save(path)?;
    }
    tracing::info!(node_id = %grant.node_id, "enrolled");
    Ok(grant)
}

/// Outcome of one poll.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PollReport {
    pub heartbeat_ok: bool,
    pub liveness: Option<Liveness>,
    /// Commands in the heartbeat response, including redeliveries.
    pub received: usize,
    /// Commands skipped because they were already taken.
    pub duplicates: usize,
    pub results_acked: usize,
    pub results_pending: usize,
}

pub struct Agent {
    cfg: AgentConfig,
    grant: Grant,
    transport: Arc<dyn Transport>,
    sessions: SessionManager,
    journal: AgentJournal,
    taken: BTreeSet<Id>,
    outbox: BTreeMap<Id, ResultRequest>,
    running: JoinSet<ResultRequest>,
    sampler: MetricsSampler,
    pace: Pace,
    staging: PathBuf,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("node_id", &self.grant.node_id)
            .field("outbox", &self.outbox.len())
            .finish_non_exhaustive()
    }
}

impl Agent {
    /// Builds an agent, replaying the journal at `journal_path` if given.
    pub async fn start(
        cfg: AgentConfig,
        grant: Grant,
        transport: Arc<dyn Transport>,
        runtime: Arc<dyn SessionRuntime>,
        journal_path: Option<&Path>,
        pace: Pace,
    ) -> Result<Self, AgentError> {
        let (mut journal, recovered) = match journal_path {
            Some(p) => AgentJournal::open(p).map_err(|e| AgentError::Io(format!("journal {}: {e}", p.display())))?,
            None => (AgentJournal::memory(), Default::default()),
        };
        let staging = match (&cfg.staging_dir, journal_path) {
            (Some(dir), _) => dir.clone(),
            (None, Some(j)) => j.parent().unwrap_or_else(|| Path::new(".")).join("staged"),
            (None, None) => std::env::temp_dir().join("fedplane-staged"),
        };
        let mut sessions = SessionManager::new(runtime, cfg.session_limits());
        sessions.recover(recovered.sessions.into_values().collect(), &mut journal).await;
        Ok(Agent {
            cfg,
            grant,
            transport,
            sessions,
            journal,
            taken: recovered.taken,
            outbox: recovered.pending,
            running: JoinSet::new(),
            sampler: MetricsSampler::default(),
            pace,
            staging,
        })
    }

    pub fn node_id(&self) -> &Id {
        &self.grant.node_id
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.sessions
    }

    pub fn pending_results(&self) -> usize {
        self.outbox.len() + self.running.len()
    }

    fn queue_result(&mut self, result: ResultRequest) {
        self.journal.append(&JournalEvent::ResultPending(result.clone()));
        self.outbox.insert(result.command_id.clone(), result);
    }

    /// Reports every pending result until one fails to get through.
    async fn flush(&mut self) -> usize {
        let mut acked = 0;
        let pending: Vec<ResultRequest> = self.outbox.values().cloned().collect();
        for result in pending {
            match self.transport.report(&self.grant.agent_token, &result).await {
                Ok(_) => {}
                // The server already holds a terminal state for it.
                Err(TransportError::Api(e)) if e.code == "ALREADY_TERMINAL" || e.code == "UNKNOWN_COMMAND" => {}
                Err(err) => {
                    tracing::debug!(command_id = %result.command_id, %err, "result not delivered, will retry");
                    break;
                }
            }
            self.outbox.remove(&result.command_id);
            self.journal.append(&JournalEvent::ResultAcked {
                command_id: result.command_id,
            });
            acked += 1;
        }
        acked
    }

    fn collect_finished(&mut self) {
        while let Some(done) = self.running.try_join_next() {
            match done {
                Ok(result) => self.queue_result(result),
                Err(err) => tracing::error!(%err, "command task failed"),
            }
        }
    }

    async fn take(&mut self, cmd: CommandEnvelope) {
        self.journal.append(&JournalEvent::CommandTaken {
            command_id: cmd.command_id.clone(),
        });
        self.taken.insert(cmd.command_id.clone());
        let command_id = cmd.command_id;
        match cmd.action {
            CommandAction::Exec { argv } => {
                let cap = self.cfg.output_cap;
                let timeout = Duration::from_secs(cmd.timeout_s.max(1));
                self.running.spawn(async move {
                    let r = exec::run(&argv, timeout, cap).await;
                    ResultRequest {
                        command_id,
                        outcome: r.outcome,
                        exit_status: r.exit_status,
                        output: r.output,
                        access_url: None,
                        error_code: None,
                    }
                });
            }
            CommandAction::StartSession {
                session_id,
                image_ref,
                port_hint,
            } => {
                let now = self.pace.now();
                let result = match self.sessions.start(&session_id, &image_ref, port_hint, now, &mut self.journal).await {
                    Ok(s) => ResultRequest {
                        command_id,
                        outcome: ResultOutcome::Exited,
                        exit_status: Some(0),
                        output: format!("session running on port {}", s.access_port),
                        access_url: Some(s.access_url),
                        error_code: None,
                    },
                    Err(err) => ResultRequest {
                        command_id,
                        outcome: ResultOutcome::Exited,
                        exit_status: Some(1),
                        output: err.to_string(),
                        access_url: None,
                        error_code: Some(err.code().into()),
                    },
                };
                self.queue_result(result);
            }
            CommandAction::StageArtifact {
                artifact_id,
                filename,
                checksum,
            } => {
                let result = match self.stage(&artifact_id, &filename, &checksum).await {
                    Ok(path) => ResultRequest {
                        command_id,
                        outcome: ResultOutcome::Exited,
                        exit_status: Some(0),
                        output: format!("staged {}", path.display()),
                        access_url: None,
                        error_code: None,
                    },
                    Err((code, msg)) => ResultRequest {
                        command_id,
                        outcome: ResultOutcome::Exited,
                        exit_status: Some(1),
                        output: msg,
                        access_url: None,
                        error_code: Some(code.into()),
                    },
                };
                self.queue_result(result);
            }
            CommandAction::StopSession { session_id } => {
                let result = match self.sessions.stop(&session_id, &mut self.journal).await {
                    Ok(()) => ResultRequest {
                        command_id,
                        outcome: ResultOutcome::Exited,
                        exit_status: Some(0),
                        output: "session stopped".into(),
                        access_url: None,
                        error_code: None,
                    },
                    Err(err) => ResultRequest {
                        command_id,
                        outcome: ResultOutcome::Exited,
                        exit_status: Some(1),
                        output: err.to_string(),
                        access_url: None,
                        error_code: Some(err.code().into()),
                    },
                };
                self.queue_result(result);
            }
        }
    }

    /// Downloads an artifact into `<staging>/<artifact id>/<filename>`.
    async fn stage(&self, artifact_id: &Id, filename: &str, checksum: &str) -> Result<PathBuf, (&'static str, String)> {
        if filename.is_empty() || filename == "." || filename == ".." || filename.contains(['/', '\\', '\0']) {
            return Err(("VALIDATION", format!("refusing to stage {filename:?}")));
        }
        let bytes = self
            .transport
            .fetch_artifact(&self.grant.agent_token, artifact_id)
            .await
            .map_err(|e| ("FETCH_FAILED", e.to_string()))?;
        if crate::repos::sha256_hex(&bytes) != checksum {
            return Err(("CHECKSUM_MISMATCH", "downloaded bytes do not match the artifact checksum".into()));
        }
        let path = self.staging.join(artifact_id.as_str()).join(filename);
        write_private(&path, &bytes).map_err(|e| ("STORAGE", e.to_string()))?;
        Ok(path)
    }

    /// One heartbeat cycle: flush results, heartbeat, take new commands.
    /// With `wait`, shell commands are awaited and their results reported
    /// before returning.
    pub async fn poll_once(&mut self, wait: bool) -> Result<PollReport, AgentError> {
        let mut report = PollReport::default();
        self.collect_finished();
        report.results_acked += self.flush().await;
        let hb = HeartbeatRequest {
            metrics: self.sampler.sample(),
            agent_version: Some(crate::VERSION.into()),
            running_sessions: self.sessions.running_ids(),
        };
        match self.transport.heartbeat(&self.grant.agent_token, &hb).await {
            Ok(resp) => {
                report.heartbeat_ok = true;
                report.liveness = Some(resp.liveness);
                report.received = resp.commands.len();
                for cmd in resp.commands {
                    if self.taken.contains(&cmd.command_id) {
                        report.duplicates += 1;
                        continue;
                    }
                    self.take(cmd).await;
                }
            }
            Err(TransportError::Api(e)) if e.code == "UNAUTHORIZED" => {
                return Err(AgentError::Rejected(format!("agent token no longer accepted: {}", e.message)));
            }
            Err(err) => tracing::warn!(%err, "heartbeat failed"),
        }
        if wait {
            while let Some(done) = self.running.join_next().await {
                match done {
                    Ok(result) => self.queue_result(result),
                    Err(err) => tracing::error!(%err, "command task failed"),
                }
            }
        }
        report.results_acked += self.flush().await;
        report.results_pending = self.pending_results();
        Ok(report)
    }

    /// Polls every heartbeat interval until `shutdown` resolves, then waits
    /// for in-flight commands. Sessions stay recorded in the journal and are
    /// restored by the next start.
    pub async fn run(mut self, shutdown: impl std::future::Future<Output = ()>) -> Result<(), AgentError> {
        let mut tick = tokio::time::interval(Duration::from_secs(self.cfg.heartbeat_interval_s.max(1)));
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tokio::pin!(shutdown);
        loop {
            tokio::select! {
                _ = &mut shutdown => break,
                _ = tick.tick() => {
                    self.poll_once(false).await?;
                }
                Some(done) = self.running.join_next(), if !self.running.is_empty() => {
                    if let Ok(result) = done {
                        self.queue_result(result);
                    }
                    self.flush().await;
                }
            }
        }
        self.shutdown().await;
        Ok(())
    }

    pub async fn shutdown(&mut self) {
        while let Some(done) = self.running.join_next().await {
            if let Ok(result) = done {
                self.queue_result(result);
            }
        }
        self.flush().await;
    }

    /// Stops every running session.
    pub async fn stop_sessions(&mut self) {
        self.sessions.stop_all(&mut self.journal).await;
    }
}
