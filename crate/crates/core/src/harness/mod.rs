//! Scenario runner: an in-process control plane plus a fleet of simulated
//! agents (MOCK runtime) driven through integrate, enroll, reserve,
//! connect and disconnect, with transport delay and loss injected at the
//! agent transport.
//!
//! With `clock = "virtual"` the run is sequential on a manual clock and
//! every byte of the report is a function of the scenario (seed included).
//! With `clock = "wall"` agents poll concurrently in real time.

pub mod fixture;
pub mod report;

use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::agent::runtime::RuntimeKind;
use crate::agent::transport::{DelayModel, DelayShim, DropShim, HttpTransport, InProcessTransport, Transport};
use crate::agent::{enroll_flow, Agent, AgentConfig, Pace};
use crate::auth::LoginGrant;
use crate::clock::{Clock, ManualClock, SharedClock, SystemClock};
use crate::config::{HashParams, PlaneConfig};
use crate::context::{ControlMode, DeviceDescriptor, FederationState, Role};
use crate::error::{Error, ErrorCode, Result};
use crate::federation::script::parse_embedded;
use crate::federation::{CommandStatus, RunCommand};
use crate::gateway::http::{serve_on, ServerHandle};
use crate::gateway::{
    ApiRequest, ApiResponse, ConnectBody, ControlInterface, DispatchBody, Gateway, IntegrationRequest, IntegrationResult,
    LoginBody, Method, ReservationBody,
};
use crate::ids::Id;
use crate::sessions::{LatencyStats, Session, SessionState};
use crate::ControlPlane;

pub use report::{render, ReportFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    /// Agents call the gateway directly.
    Inproc,
    /// Agents and the driver talk to a real HTTP server on loopback.
    Http,
}

/// A scenario, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub labs: usize,
    pub testbeds_per_lab: usize,
    pub nodes_per_testbed: usize,
    /// Share of testbeds registered as DISTRIBUTED (the rest CENTRALIZED).
    pub distributed_fraction: f64,
    /// One-way delay added to each agent request and response.
    pub delay: DelayModel,
    pub drop_rate: f64,
    pub session_count: usize,
    /// Sessions run in batches of this many, on distinct nodes.
    pub parallelism: usize,
    /// Connect requests start this far apart (measured from run start).
    pub session_spacing_ms: u64,
    pub poll_interval_ms: u64,
    /// Simulated container start-up time of the MOCK runtime.
    pub deploy_ms: u64,
    /// Shell commands dispatched across the fleet after the sessions.
    pub commands: usize,
    pub command_argv: Vec<String>,
    pub command_timeout_s: u64,
    pub seed: u64,
    pub clock: ClockMode,
    pub transport: TransportMode,
    /// Give up on a phase after this much (virtual or wall) time.
    pub phase_timeout_s: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            labs: 1,
            testbeds_per_lab: 1,
            nodes_per_testbed: 1,
            distributed_fraction: 1.0,
            delay: DelayModel::Fixed { ms: 0 },
            drop_rate: 0.0,
            session_count: 1,
            parallelism: 1,
            session_spacing_ms: 5_000,
            poll_interval_ms: 1_000,
            deploy_ms: 0,
            commands: 0,
            command_argv: vec!["true".into()],
            command_timeout_s: 30,
            seed: 1,
            clock: ClockMode::Virtual,
            transport: TransportMode::Inproc,
            phase_timeout_s: 600,
        }
    }
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec =
            toml::from_str(text).map_err(|e| Error::new(ErrorCode::Validation, format!("scenario: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("labs", self.labs),
            ("testbeds_per_lab", self.testbeds_per_lab),
            ("nodes_per_testbed", self.nodes_per_testbed),
            ("parallelism", self.parallelism),
        ] {
            if v == 0 {
                bad.push(name.to_string());
            }
        }
        if !(0.0..=1.0).contains(&self.distributed_fraction) {
            bad.push("distributed_fraction".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            bad.push("drop_rate".into());
        }
        if self.poll_interval_ms == 0 {
            bad.push("poll_interval_ms".into());
        }
        if self.commands > 0 && self.command_argv.is_empty() {
            bad.push("command_argv".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::new(ErrorCode::Validation, "invalid scenario").with_details(bad))
        }
    }

    pub fn node_count(&self) -> usize {
        self.labs * self.testbeds_per_lab * self.nodes_per_testbed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSample {
    pub index: usize,
    pub node: String,
    pub latency_ms: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandTally {
    pub dispatched: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub timed_out: usize,
    pub open: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub spec: ScenarioSpec,
    pub nodes: usize,
    pub federated: usize,
    pub samples: Vec<SessionSample>,
    pub stats: LatencyStats,
    pub commands: CommandTally,
    /// `(requests, responses)` lost by the drop shim.
    pub transport_drops: (u64, u64),
    pub checks: Vec<Check>,
    /// Only present for wall-clock runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<u64>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }

    /// An empty report for `spec`; renders as headers only.
    pub fn empty(spec: ScenarioSpec) -> Self {
        ScenarioReport {
            spec,
            nodes: 0,
            federated: 0,
            samples: Vec::new(),
            stats: LatencyStats::from_millis(&[]),
            commands: CommandTally::default(),
            transport_drops: (0, 0),
            checks: Vec::new(),
            wall_clock_ms: None,
        }
    }
}

/// Runs `spec` and fails with SCENARIO_FAILED naming the first violated
/// check.
pub async fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioReport> {
    let report = run_scenario_report(spec).await?;
    match report.first_failure() {
        None => Ok(report),
        Some(first) => Err(Error::new(ErrorCode::ScenarioFailed, format!("{}: {}", first.name, first.detail)).with_details(
            report
                .checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name.clone())
                .collect(),
        )),
    }
}

/// Driver-side API access, in-process or over HTTP.
enum Client {
    Inproc(Gateway),
    Http { client: reqwest::Client, base: String },
}

impl Client {
    async fn call(&self, req: ApiRequest) -> Result<ApiResponse> {
        match self {
            Client::Inproc(g) => Ok(g.handle(&req)),
            Client::Http { client, base } => {
                let mut url = format!("{base}{}", req.path);
                if !req.query.is_empty() {
                    let q: String = form_urlencoded::Serializer::new(String::new())
                        .extend_pairs(req.query.iter())
                        .finish();
                    url = format!("{url}?{q}");
                }
                let method = match req.method.unwrap_or(Method::Get) {
                    Method::Get => reqwest::Method::GET,
                    Method::Post => reqwest::Method::POST,
                    Method::Put => reqwest::Method::PUT,
                    Method::Delete => reqwest::Method::DELETE,
                };
                let mut builder = client.request(method, url).body(req.body.clone());
                for (k, v) in &req.headers {
                    builder = builder.header(k, v);
                }
                let resp = builder
                    .send()
                    .await
                    .map_err(|e| Error::new(ErrorCode::ScenarioFailed, format!("HTTP request failed: {e}")))?;
                let status = resp.status().as_u16();
                let headers = resp
                    .headers()
                    .iter()
                    .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
                    .collect();
                let body = resp
                    .bytes()
                    .await
                    .map_err(|e| Error::new(ErrorCode::ScenarioFailed, format!("HTTP body failed: {e}")))?
                    .to_vec();
                Ok(ApiResponse { status, headers, body })
            }
        }
    }

    async fn json<T: serde::de::DeserializeOwned>(&self, req: ApiRequest, what: &str) -> Result<T> {
        let resp = self.call(req).await?;
        resp.decode().map_err(|e| {
            Error::new(ErrorCode::ScenarioFailed, format!("{what} failed: {} {}", e.code, e.message)).with_details(e.details)
        })
    }
}

struct Slot {
    agent: Agent,
    next_poll: DateTime<Utc>,
}

/// The simulated agents and how they are driven.
enum Fleet {
    Virtual {
        clock: ManualClock,
        slots: Vec<Slot>,
        period: chrono::Duration,
    },
    Wall {
        stop: watch::Sender<bool>,
        tasks: Vec<JoinHandle<Agent>>,
    },
}

impl Fleet {
    /// Advances the simulation until `done` holds or `limit` passes.
    async fn run_until(&mut self, plane: &ControlPlane, limit: Duration, mut done: impl FnMut(&ControlPlane) -> bool) -> Result<bool> {
        match self {
            Fleet::Virtual { clock, slots, period } => {
                let deadline = clock.now() + chrono::Duration::from_std(limit).unwrap_or(chrono::Duration::MAX);
                loop {
                    if done(plane) {
                        return Ok(true);
                    }
                    if clock.now() >= deadline || slots.is_empty() {
                        return Ok(false);
                    }
                    step(clock, slots, *period, plane).await?;
                }
            }
            Fleet::Wall { .. } => {
                let deadline = Instant::now() + limit;
                loop {
                    if done(plane) {
                        return Ok(true);
                    }
                    if Instant::now() >= deadline {
                        return Ok(false);
                    }
                    tokio::time::sleep(Duration::from_millis(5)).await;
                }
            }
        }
    }

    /// Lets time pass until `at` (virtual) or simply returns (wall, where
    /// agents run on their own).
    async fn idle_until(&mut self, plane: &ControlPlane, at: DateTime<Utc>) -> Result<()> {
        if let Fleet::Virtual { clock, slots, period } = self {
            while !slots.is_empty() {
                let next = slots.iter().map(|s| s.next_poll).min().expect("nonempty");
                if next > at {
                    break;
                }
                step(clock, slots, *period, plane).await?;
            }
            if clock.now() < at {
                clock.set(at);
            }
        }
        Ok(())
    }

    async fn into_agents(self) -> Vec<Agent> {
        match self {
            Fleet::Virtual { slots, .. } => slots.into_iter().map(|s| s.agent).collect(),
            Fleet::Wall { stop, tasks } => {
                let _ = stop.send(true);
                let mut out = Vec::new();
                for t in tasks {
                    if let Ok(a) = t.await {
                        out.push(a);
                    }
                }
                out
            }
        }
    }
}

/// Polls the agent due next, then sweeps.
async fn step(clock: &ManualClock, slots: &mut [Slot], period: chrono::Duration, plane: &ControlPlane) -> Result<()> {
    let (i, due) = slots
        .iter()
        .enumerate()
        .min_by_key(|(i, s)| (s.next_poll, *i))
        .map(|(i, s)| (i, s.next_poll))
        .expect("fleet is nonempty");
    if clock.now() < due {
        clock.set(due);
    }
    let slot = &mut slots[i];
    slot.agent
        .poll_once(true)
        .await
        .map_err(|e| Error::new(ErrorCode::ScenarioFailed, format!("agent {}: {e}", slot.agent.node_id())))?;
    let now = clock.now();
    let mut next = due + period;
    while next <= now {
        next += period;
    }
    slot.next_poll = next;
    plane.sweep()?;
    Ok(())
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

async fn probe_http(url: &str) -> bool {
    let Some(rest) = url.strip_prefix("http://") else { return false };
    let authority = rest.split('/').next().unwrap_or_default();
    let Ok(Ok(mut stream)) = tokio::time::timeout(Duration::from_secs(5), tokio::net::TcpStream::connect(authority)).await else {
        return false;
    };
    let req = format!("GET / HTTP/1.1\r\nhost: {authority}\r\nconnection: close\r\n\r\n");
    if stream.write_all(req.as_bytes()).await.is_err() {
        return false;
    }
    let mut buf = Vec::new();
    let _ = tokio::time::timeout(Duration::from_secs(5), stream.read_to_end(&mut buf)).await;
    buf.starts_with(b"HTTP/1.1 200")
}

fn plane_config(spec: &ScenarioSpec) -> PlaneConfig {
    PlaneConfig {
        password_hash: HashParams::fast(),
        sync_writes: false,
        sweep_interval_ms: 100,
        // A run never outlives the reservation window in virtual time
        // unless sessions are spaced very far apart.
        max_reservation_s: 8 * 3600,
        deploy_timeout_s: 120.max(spec.deploy_ms as i64 / 1000 * 4),
        ..PlaneConfig::default()
    }
}

/// Runs the scenario and returns the report with every check evaluated.
/// Errors only when the scenario cannot be set up at all.
pub async fn run_scenario_report(spec: &ScenarioSpec) -> Result<ScenarioReport> {
    spec.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let manual = ManualClock::at_epoch();
    let (clock, pace): (SharedClock, Pace) = match spec.clock {
        ClockMode::Virtual => (Arc::new(manual.clone()), Pace::Virtual(manual.clone())),
        ClockMode::Wall => (Arc::new(SystemClock), Pace::Real),
    };

    let mut cfg = plane_config(spec);
    let listener = match spec.transport {
        TransportMode::Http => {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0")
                .await
                .map_err(|e| Error::new(ErrorCode::ScenarioFailed, format!("bind: {e}")))?;
            let addr = l.local_addr().map_err(|e| Error::new(ErrorCode::ScenarioFailed, e.to_string()))?;
            cfg.public_url = format!("http://{addr}");
            Some(l)
        }
        TransportMode::Inproc => None,
    };
    let plane = Arc::new(ControlPlane::builder(cfg).clock(clock.clone()).id_seed(spec.seed).build()?);
    let gateway = Gateway::new(plane.clone());
    let mut server: Option<ServerHandle> = None;
    let client = match listener {
        Some(l) => {
            let handle = serve_on(gateway.clone(), l)
                .await
                .map_err(|e| Error::new(ErrorCode::ScenarioFailed, format!("serve: {e}")))?;
            let base = handle.base_url();
            server = Some(handle);
            Client::Http {
                client: reqwest::Client::new(),
                base,
            }
        }
        None => Client::Inproc(gateway.clone()),
    };

    // Accounts.
    let auth = plane.auth();
    auth.create_user("owner", "owner-credential", Role::Owner)?;
    auth.create_user("experimenter", "experimenter-credential", Role::Experimenter)?;
    let login = |user: &str, cred: &str| {
        ApiRequest::new(Method::Post, "/v1/auth/login").json(&LoginBody {
            username: user.into(),
            credential: cred.into(),
        })
    };
    let owner: LoginGrant = client.json(login("owner", "owner-credential"), "owner login").await?;
    let user: LoginGrant = client.json(login("experimenter", "experimenter-credential"), "experimenter login").await?;

    // Integration: one request per testbed.
    let kinds = ["SDR", "SERVER", "IOT", "UAV"];
    let mut integrations: Vec<IntegrationResult> = Vec::new();
    for l in 0..spec.labs {
        for t in 0..spec.testbeds_per_lab {
            let distributed = rng.random_bool(spec.distributed_fraction);
            let nodes = (0..spec.nodes_per_testbed)
                .map(|n| ControlInterface {
                    public_identifier: format!("node {}", n + 1),
                    devices: vec![DeviceDescriptor {
                        kind: kinds[(l + t + n) % kinds.len()].into(),
                        model: format!("model-{}", n % 3),
                        notes: String::new(),
                    }],
                })
                .collect();
            let req = IntegrationRequest {
                lab_name: format!("Lab {}", l + 1),
                public_name: format!("Testbed {}-{}", l + 1, t + 1),
                description: "simulated testbed".into(),
                control_mode: if distributed { ControlMode::Distributed } else { ControlMode::Centralized },
                nodes,
            };
            let resp = client
                .json(ApiRequest::new(Method::Post, "/v1/testbeds/integrate").bearer(&owner.token).json(&req), "integration")
                .await?;
            integrations.push(resp);
        }
    }

    // Bind one image per testbed.
    for integ in &integrations {
        let body = crate::gateway::BindBody {
            target_id: integ.testbed_id.clone(),
            image_ref: "fedplane/remote-desktop:latest".into(),
            description: "remote desktop".into(),
        };
        let _: serde_json::Value = client
            .json(ApiRequest::new(Method::Post, "/v1/bindings").bearer(&owner.token).json(&body), "image binding")
            .await?;
    }

    // Enroll one agent per script.
    let base: Arc<dyn Transport> = match &client {
        Client::Inproc(g) => Arc::new(InProcessTransport::new(g.clone())),
        Client::Http { base, .. } => Arc::new(HttpTransport::new(base)),
    };
    let mut drop_shims = Vec::new();
    let mut agents = Vec::new();
    let mut residue = Vec::new();
    let scripts: Vec<_> = integrations.iter().flat_map(|i| i.scripts.values().cloned()).collect();
    for (i, script) in scripts.iter().enumerate() {
        let embedded = parse_embedded(&script.script)
            .ok_or_else(|| Error::new(ErrorCode::ScenarioFailed, "script lacks embedded activation"))?;
        let agent_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        let dropper = Arc::new(DropShim::new(base.clone(), spec.drop_rate, agent_seed ^ 0xD7));
        drop_shims.push(dropper.clone());
        let transport: Arc<dyn Transport> = Arc::new(DelayShim::new(dropper as Arc<dyn Transport>, spec.delay, pace.clone(), agent_seed));
        let mut acfg = AgentConfig {
            server_url: embedded.server_url,
            activation_id: Some(embedded.activation_id),
            activation_code: Some(embedded.activation_code.clone()),
            runtime: RuntimeKind::Mock,
            bind_host: "127.0.0.1".into(),
            enroll_attempts: 10,
            retry_base_ms: 50,
            ..AgentConfig::default()
        };
        // Enrollment is not subject to drops: a lost response would burn
        // the single-use activation and strand the node.
        let enroll_transport = DelayShim::new(base.clone(), spec.delay, pace.clone(), agent_seed ^ 0xE1);
        let grant = enroll_flow(&mut acfg, None, &enroll_transport, &pace)
            .await
            .map_err(|e| Error::new(ErrorCode::ScenarioFailed, format!("enroll {}: {e}", script.public_identifier)))?;
        if toml::to_string(&acfg).unwrap_or_default().contains(&embedded.activation_code) {
            residue.push(script.node_id.clone());
        }
        let runtime = acfg.build_runtime(pace.clone(), Duration::from_millis(spec.deploy_ms));
        let agent = Agent::start(acfg, grant, transport, runtime, None, pace.clone())
            .await
            .map_err(|e| Error::new(ErrorCode::ScenarioFailed, e.to_string()))?;
        agents.push(agent);
    }

    let mut checks = Vec::new();
    let node_ids: Vec<Id> = scripts.iter().map(|s| s.node_id.clone()).collect();
    let nodes: Vec<_> = plane.store().read(|s| node_ids.iter().filter_map(|id| s.nodes.get(id).cloned()).collect());
    let federated = nodes.iter().filter(|n| n.federation_state == FederationState::Federated).count();
    checks.push(check("federation", federated == spec.node_count(), format!("{federated}/{} nodes federated", spec.node_count())));
    let mut namespaces: Vec<&str> = nodes.iter().filter_map(|n| n.namespace.as_deref()).collect();
    namespaces.sort_unstable();
    namespaces.dedup();
    checks.push(check("namespaces", namespaces.len() == nodes.len(), format!("{} distinct namespaces", namespaces.len())));
    checks.push(check("credential_residue", residue.is_empty(), format!("{} agents kept the activation code", residue.len())));

    // Start the fleet.
    let period = Duration::from_millis(spec.poll_interval_ms);
    let mut fleet = match spec.clock {
        ClockMode::Virtual => {
            let now = manual.now();
            let slots = agents
                .into_iter()
                .map(|agent| {
                    let phase = rng.random_range(0..spec.poll_interval_ms);
                    Slot {
                        agent,
                        next_poll: now + chrono::Duration::milliseconds(phase as i64),
                    }
                })
                .collect();
            Fleet::Virtual {
                clock: manual.clone(),
                slots,
                period: chrono::Duration::milliseconds(spec.poll_interval_ms as i64),
            }
        }
        ClockMode::Wall => {
            let (stop, rx) = watch::channel(false);
            // An HTTP server already sweeps on its own.
            let sweeper = server
                .is_none()
                .then(|| crate::gateway::http::spawn_sweeper(gateway.clone(), Duration::from_millis(100)));
            let mut tasks = Vec::new();
            for mut agent in agents {
                let phase = Duration::from_millis(rng.random_range(0..spec.poll_interval_ms));
                let mut rx = rx.clone();
                tasks.push(tokio::spawn(async move {
                    let mut wait = phase;
                    loop {
                        tokio::select! {
                            _ = rx.changed() => break,
                            _ = tokio::time::sleep(wait) => {}
                        }
                        if let Err(err) = agent.poll_once(false).await {
                            tracing::error!(%err, "simulated agent stopped");
                            break;
                        }
                        wait = period;
                    }
                    agent.shutdown().await;
                    agent
                }));
            }
            // The sweeper stops with the stop signal.
            let mut rx = rx.clone();
            tokio::spawn(async move {
                let _ = rx.changed().await;
                if let Some(s) = sweeper {
                    s.abort();
                }
            });
            Fleet::Wall { stop, tasks }
        }
    };
    let limit = Duration::from_secs(spec.phase_timeout_s.max(1));

    // Reserve every node for the experimenter.
    let now = clock.now();
    let reservation = ReservationBody {
        node_ids: node_ids.clone(),
        start_at: now,
        end_at: now + chrono::Duration::hours(8),
    };
    let _: serde_json::Value = client
        .json(ApiRequest::new(Method::Post, "/v1/reservations").bearer(&user.token).json(&reservation), "reservation")
        .await?;

    // Sessions.
    let run_start = clock.now();
    let mut samples = Vec::new();
    let mut unreachable = 0usize;
    let mut failed_sessions = Vec::new();
    let batch = spec.parallelism.min(node_ids.len()).max(1);
    let mut index = 0usize;
    while index < spec.session_count {
        let at = run_start + chrono::Duration::milliseconds((spec.session_spacing_ms * index as u64) as i64);
        fleet.idle_until(&plane, at).await?;
        let mut batch_sessions: Vec<Session> = Vec::new();
        for k in index..(index + batch).min(spec.session_count) {
            let node_id = node_ids[k % node_ids.len()].clone();
            let s: Session = client
                .json(ApiRequest::new(Method::Post, "/v1/sessions").bearer(&user.token).json(&ConnectBody { node_id }), "connect")
                .await?;
            batch_sessions.push(s);
        }
        let ids: Vec<Id> = batch_sessions.iter().map(|s| s.session_id.clone()).collect();
        fleet
            .run_until(&plane, limit, |p| {
                ids.iter().all(|id| p.sessions().get(id).is_ok_and(|s| !matches!(s.state, SessionState::Requested | SessionState::Deploying)))
            })
            .await?;
        for (offset, id) in ids.iter().enumerate() {
            let s = plane.sessions().get(id)?;
            match (s.state, s.access_latency_ms, &s.access_url) {
                (SessionState::Ready, Some(ms), Some(url)) => {
                    if !probe_http(url).await {
                        unreachable += 1;
                    }
                    let node = plane
                        .store()
                        .read(|st| st.nodes.get(&s.node_id).and_then(|n| n.namespace.clone()))
                        .unwrap_or_default();
                    samples.push(SessionSample {
                        index: index + offset,
                        node,
                        latency_ms: ms,
                    });
                }
                _ => failed_sessions.push(format!("{}: {:?} {}", index + offset, s.state, s.failure.clone().unwrap_or_default())),
            }
            let _: Session = client
                .json(ApiRequest::new(Method::Delete, &format!("/v1/sessions/{id}")).bearer(&user.token), "disconnect")
                .await?;
        }
        fleet
            .run_until(&plane, limit, |p| {
                ids.iter().all(|id| {
                    let Ok(s) = p.sessions().get(id) else { return false };
                    let stop_done = s.stop_command_id.as_ref().is_none_or(|c| {
                        p.federation().get_command(c).is_ok_and(|c| c.status.is_terminal())
                    });
                    stop_done && p.federation().get_command(&s.start_command_id).is_ok_and(|c| c.status.is_terminal())
                })
            })
            .await?;
        index += batch;
    }
    checks.push(check(
        "sessions_ready",
        failed_sessions.is_empty(),
        if failed_sessions.is_empty() {
            format!("{} sessions ready", samples.len())
        } else {
            format!("{} failed, first: {}", failed_sessions.len(), failed_sessions[0])
        },
    ));
    checks.push(check("endpoints_reachable", unreachable == 0, format!("{unreachable} access URLs did not answer 200")));

    // Commands.
    let mut dispatched: Vec<Id> = Vec::new();
    for k in 0..spec.commands {
        let node_id = &node_ids[k % node_ids.len()];
        let body = DispatchBody {
            argv: spec.command_argv.clone(),
            timeout_s: spec.command_timeout_s,
        };
        let cmd: RunCommand = client
            .json(
                ApiRequest::new(Method::Post, &format!("/v1/nodes/{node_id}/commands")).bearer(&owner.token).json(&body),
                "dispatch",
            )
            .await?;
        dispatched.push(cmd.command_id);
    }
    fleet
        .run_until(&plane, limit, |p| {
            dispatched.iter().all(|id| p.federation().get_command(id).is_ok_and(|c| c.status.is_terminal()))
        })
        .await?;
    let mut tally = CommandTally {
        dispatched: dispatched.len(),
        ..CommandTally::default()
    };
    for id in &dispatched {
        match plane.federation().get_command(id)?.status {
            CommandStatus::Succeeded => tally.succeeded += 1,
            CommandStatus::Failed => tally.failed += 1,
            CommandStatus::TimedOut => tally.timed_out += 1,
            CommandStatus::Queued | CommandStatus::Delivered => tally.open += 1,
        }
    }
    checks.push(check(
        "commands_terminal",
        tally.open == 0,
        format!("{}/{} commands reached a terminal state", tally.dispatched - tally.open, tally.dispatched),
    ));

    // Let outstanding results drain, then stop the fleet.
    fleet
        .run_until(&plane, limit, |p| p.store().read(|s| s.commands.values().all(|c| c.status.is_terminal())))
        .await?;
    let agents = fleet.into_agents().await;
    let pending: usize = agents.iter().map(Agent::pending_results).sum();
    let running: usize = agents.iter().map(|a| a.sessions().running_ids().len()).sum();
    let (live_sessions, open_commands) = plane.store().read(|s| {
        (
            s.sessions.values().filter(|x| x.state.is_live()).count(),
            s.commands.values().filter(|c| !c.status.is_terminal()).count(),
        )
    });
    checks.push(check(
        "no_leaks",
        live_sessions == 0 && open_commands == 0 && running == 0,
        format!("{live_sessions} live sessions, {open_commands} open commands, {running} running on agents"),
    ));
    checks.push(check("results_acknowledged", pending == 0, format!("{pending} results still pending on agents")));

    let latencies: Vec<i64> = samples.iter().map(|s| s.latency_ms).collect();
    let stats = LatencyStats::from_millis(&latencies);
    let ordered = match (stats.minimum_s, stats.average_s, stats.maximum_s) {
        (Some(min), Some(avg), Some(max)) => min <= avg && avg <= max,
        _ => latencies.is_empty(),
    };
    checks.push(check("latency_stats", ordered && stats.count == samples.len(), "min <= avg <= max"));

    let transport_drops = drop_shims.iter().fold((0, 0), |acc, d| {
        let (a, b) = d.dropped();
        (acc.0 + a, acc.1 + b)
    });
    if let Some(server) = server.take() {
        server.shutdown().await;
    }
    Ok(ScenarioReport {
        spec: spec.clone(),
        nodes: nodes.len(),
        federated,
        samples,
        stats,
        commands: tally,
        transport_drops,
        checks,
        wall_clock_ms: (spec.clock == ClockMode::Wall).then(|| started.elapsed().as_millis() as u64),
    })
}
