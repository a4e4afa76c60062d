//! Fleet engine: single-use activations, deployment scripts, enrollment,
//! heartbeats, run-commands and the global fleet dashboard.

pub mod script;

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::api::{
    CommandEnvelope, EnrollGrant, EnrollRequest, HeartbeatRequest, HeartbeatResponse, ResultAck, ResultOutcome,
    ResultRequest,
};
use crate::config::PlaneConfig;
use crate::context::{transition_node, FederationState};
use crate::error::{Error, ErrorCode, Result};
use crate::ids::{new_secret, secret_digest, Id, IdGenerator};
use crate::store::{State, Tx};
use crate::ControlPlane;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub activation_id: Id,
    pub activation_code: String,
    pub node_id: Id,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub consumed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumed_at: Option<DateTime<Utc>>,
    /// Superseded by a newer activation for the same node.
    #[serde(default)]
    pub revoked: bool,
}

impl std::fmt::Debug for ActivationRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActivationRecord")
            .field("activation_id", &self.activation_id)
            .field("activation_code", &"<redacted>")
            .field("node_id", &self.node_id)
            .field("expires_at", &self.expires_at)
            .field("consumed", &self.consumed)
            .field("revoked", &self.revoked)
            .finish()
    }
}

impl ActivationRecord {
    pub fn is_live(&self, now: DateTime<Utc>) -> bool {
        !self.consumed && !self.revoked && now < self.expires_at
    }
}

/// Last generated script per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub node_id: Id,
    pub activation_id: Id,
    pub checksum: String,
    pub generated_at: DateTime<Utc>,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentScript {
    pub node_id: Id,
    pub activation_id: Id,
    pub script_text: String,
    pub checksum: String,
    pub generated_at: DateTime<Utc>,
}

impl std::fmt::Debug for DeploymentScript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeploymentScript")
            .field("node_id", &self.node_id)
            .field("activation_id", &self.activation_id)
            .field("checksum", &self.checksum)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Liveness {
    Online,
    Degraded,
    Offline,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_memory_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_memory_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_percent: Option<f64>,
}

/// Live fleet entry for one enrolled control interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub node_id: Id,
    /// SHA-256 of the agent's bearer token.
    pub token_digest: String,
    pub agent_version: String,
    pub enrolled_at: DateTime<Utc>,
    pub last_heartbeat_at: DateTime<Utc>,
    pub liveness: Liveness,
    pub metrics: AgentMetrics,
    #[serde(default)]
    pub host_facts: BTreeMap<String, String>,
    #[serde(default)]
    pub running_sessions: Vec<Id>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CommandAction {
    Exec {
        argv: Vec<String>,
    },
    StartSession {
        session_id: Id,
        image_ref: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        port_hint: Option<u16>,
    },
    StopSession {
        session_id: Id,
    },
    /// Copy an artifact onto the agent host while a session is live.
    StageArtifact {
        artifact_id: Id,
        filename: String,
        checksum: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandStatus {
    Queued,
    Delivered,
    Succeeded,
    Failed,
    TimedOut,
}

impl CommandStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, CommandStatus::Succeeded | CommandStatus::Failed | CommandStatus::TimedOut)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCommand {
    pub command_id: Id,
    pub node_id: Id,
    pub action: CommandAction,
    pub timeout_s: u64,
    pub status: CommandStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub output_truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    /// Queued while the node was OFFLINE; drains when it returns.
    #[serde(default)]
    pub queued_while_offline: bool,
    #[serde(default)]
    pub deliveries: u32,
}

/// One row of the global dashboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetEntry {
    pub node_id: Id,
    pub public_identifier: String,
    pub namespace: Option<String>,
    pub federation_state: FederationState,
    pub testbed_id: Id,
    pub testbed_name: String,
    pub lab_id: Id,
    pub lab_name: String,
    pub liveness: Option<Liveness>,
    pub last_heartbeat_at: Option<DateTime<Utc>>,
    pub heartbeat_age_s: Option<i64>,
    pub metrics: AgentMetrics,
    pub agent_version: Option<String>,
    pub pending_commands: usize,
    pub running_sessions: usize,
    /// OFFLINE for at least `stale_after_days`.
    pub stale: bool,
}

/// Liveness as a pure function of heartbeat age and thresholds: DEGRADED
/// once `degraded_after` whole intervals have been missed, OFFLINE after
/// `offline_after`.
pub fn compute_liveness(
    now: DateTime<Utc>,
    last_heartbeat_at: DateTime<Utc>,
    interval_s: i64,
    degraded_after: i64,
    offline_after: i64,
) -> Liveness {
    let elapsed_ms = (now - last_heartbeat_at).num_milliseconds().max(0);
    let missed = elapsed_ms / (interval_s.max(1) * 1000);
    if missed >= offline_after {
        Liveness::Offline
    } else if missed >= degraded_after {
        Liveness::Degraded
    } else {
        Liveness::Online
    }
}

fn liveness_for(cfg: &PlaneConfig, now: DateTime<Utc>, agent: &AgentRecord) -> Liveness {
    compute_liveness(
        now,
        agent.last_heartbeat_at,
        cfg.heartbeat_interval_s,
        cfg.degraded_after_missed,
        cfg.offline_after_missed,
    )
}

fn truncate_output(mut text: String, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text, false);
    }
    let mut cut = cap;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text.truncate(cut);
    (text, true)
}

fn rejected(reason: &'static str) -> Error {
    Error::new(ErrorCode::Rejected, "activation rejected").with_audit_detail(reason)
}

/// Queues a command for a node inside an existing transaction.
pub(crate) fn queue_command(
    tx: &mut Tx<'_>,
    ids: &IdGenerator,
    cfg: &PlaneConfig,
    node_id: &Id,
    action: CommandAction,
    timeout_s: u64,
    now: DateTime<Utc>,
) -> Result<RunCommand> {
    let node = tx
        .nodes
        .get(node_id)
        .filter(|n| n.deleted_at.is_none())
        .ok_or_else(|| Error::not_found(format!("node {node_id}")))?;
    let offline = match node.federation_state {
        FederationState::Federated => false,
        FederationState::Offline => true,
        other => {
            return Err(Error::new(
                ErrorCode::NodeNotFederated,
                format!("node is {}, commands need an enrolled agent", other.as_str()),
            ))
        }
    };
    if offline && cfg.reject_offline_dispatch {
        return Err(Error::new(ErrorCode::NodeOffline, "node is offline"));
    }
    let cmd = RunCommand {
        command_id: ids.next_id(),
        node_id: node_id.clone(),
        action,
        timeout_s: timeout_s.max(1),
        status: CommandStatus::Queued,
        output: None,
        output_truncated: false,
        exit_status: None,
        error_code: None,
        created_at: now,
        delivered_at: None,
        finished_at: None,
        queued_while_offline: offline,
        deliveries: 0,
    };
    tx.put(cmd.clone());
    Ok(cmd)
}

/// Moves a command to a terminal status, applying the output cap.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_command(
    tx: &mut Tx<'_>,
    cfg: &PlaneConfig,
    mut cmd: RunCommand,
    status: CommandStatus,
    exit_status: Option<i32>,
    output: String,
    error_code: Option<String>,
    now: DateTime<Utc>,
) -> RunCommand {
    let (output, truncated) = truncate_output(output, cfg.command_output_cap);
    cmd.status = status;
    cmd.exit_status = exit_status;
    cmd.output = Some(output);
    cmd.output_truncated = truncated;
    cmd.error_code = error_code;
    cmd.finished_at = Some(now);
    tx.put(cmd.clone());
    cmd
}

fn agent_for_token<'s>(state: &'s State, token: &str) -> Result<&'s AgentRecord> {
    state
        .agent_by_token_digest(&secret_digest(token))
        .ok_or_else(|| Error::new(ErrorCode::Unauthorized, "unknown or superseded agent token"))
}

pub struct Federation<'a> {
    pub(crate) plane: &'a ControlPlane,
}

impl Federation<'_> {
    fn cfg(&self) -> &PlaneConfig {
        &self.plane.config
    }

    pub fn issue_activation(&self, node_id: &Id) -> Result<ActivationRecord> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| issue_activation_tx(tx, &self.plane.ids, self.cfg(), node_id, now))
    }

    pub fn generate_script(&self, node_id: &Id) -> Result<DeploymentScript> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| generate_script_tx(tx, self.cfg(), node_id, now))
    }

    /// Consumes an activation and returns the agent's bearer token. Every
    /// failure is reported as the same REJECTED error; the reason is only
    /// available through `Error::audit_detail`.
    pub fn enroll(&self, req: &EnrollRequest) -> Result<EnrollGrant> {
        let now = self.plane.clock.now();
        let token = new_secret();
        let token_digest = secret_digest(&token);
        let node_id = self.plane.store.write(|tx| {
            let Some(activation_id) = Id::parse(&req.activation_id) else {
                return Err(rejected("INVALID_CODE"));
            };
            let Some(activation) = tx.activations.get(&activation_id).cloned() else {
                return Err(rejected("INVALID_CODE"));
            };
            let code_ok: bool = activation
                .activation_code
                .as_bytes()
                .ct_eq(req.activation_code.as_bytes())
                .into();
            if !code_ok {
                return Err(rejected("INVALID_CODE"));
            }
            if activation.consumed {
                return Err(rejected("ALREADY_CONSUMED"));
            }
            if activation.revoked {
                return Err(rejected("REVOKED"));
            }
            if now >= activation.expires_at {
                return Err(rejected("EXPIRED"));
            }
            let node_id = activation.node_id.clone();
            transition_node(tx, &node_id, FederationState::Federated).map_err(|_| rejected("NODE_STATE"))?;
            let mut consumed = activation;
            consumed.consumed = true;
            consumed.consumed_at = Some(now);
            tx.put(consumed);
            tx.put(AgentRecord {
                node_id: node_id.clone(),
                token_digest: token_digest.clone(),
                agent_version: req.agent_version.clone(),
                enrolled_at: now,
                last_heartbeat_at: now,
                liveness: Liveness::Online,
                metrics: AgentMetrics::default(),
                host_facts: req.host_facts.clone(),
                running_sessions: Vec::new(),
            });
            Ok(node_id)
        })?;
        tracing::info!(node_id = %node_id, "agent enrolled");
        Ok(EnrollGrant {
            node_id,
            agent_token: token,
        })
    }

    /// Records a heartbeat and returns the node's pending commands. QUEUED
    /// commands move to DELIVERED; DELIVERED commands without a result are
    /// sent again (agents dedupe by command ID).
    pub fn heartbeat(&self, token: &str, req: &HeartbeatRequest) -> Result<HeartbeatResponse> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            let mut agent = agent_for_token(tx, token)?.clone();
            let node_id = agent.node_id.clone();
            agent.last_heartbeat_at = now;
            agent.liveness = Liveness::Online;
            agent.metrics = req.metrics;
            agent.running_sessions = req.running_sessions.clone();
            if let Some(v) = &req.agent_version {
                agent.agent_version = v.clone();
            }
            tx.put(agent);
            if tx.nodes.get(&node_id).map(|n| n.federation_state) == Some(FederationState::Offline) {
                transition_node(tx, &node_id, FederationState::Federated)?;
            }
            let open: Vec<RunCommand> = tx.open_commands_for(&node_id).cloned().collect();
            let mut commands = Vec::with_capacity(open.len());
            for mut cmd in open {
                let redelivery = cmd.status == CommandStatus::Delivered;
                if !redelivery {
                    cmd.status = CommandStatus::Delivered;
                    cmd.delivered_at = Some(now);
                }
                cmd.deliveries += 1;
                tx.put(cmd.clone());
                crate::sessions::on_command_delivered(tx, &cmd, now);
                commands.push(CommandEnvelope {
                    command_id: cmd.command_id,
                    action: cmd.action,
                    timeout_s: cmd.timeout_s,
                    redelivery,
                });
            }
            Ok(HeartbeatResponse {
                acknowledged: true,
                liveness: Liveness::Online,
                commands,
            })
        })
    }

    pub fn dispatch_command(&self, node_id: &Id, argv: Vec<String>, timeout_s: u64) -> Result<RunCommand> {
        if argv.first().is_none_or(|a| a.is_empty()) {
            return Err(Error::new(ErrorCode::Validation, "argv must name a program").with_details(vec!["argv".into()]));
        }
        let now = self.plane.clock.now();
        let cmd = self.plane.store.write(|tx| {
            queue_command(tx, &self.plane.ids, self.cfg(), node_id, CommandAction::Exec { argv }, timeout_s, now)
        })?;
        if cmd.queued_while_offline {
            tracing::warn!(command_id = %cmd.command_id, node_id = %node_id, "command queued for offline node");
        }
        Ok(cmd)
    }

    pub fn get_command(&self, command_id: &Id) -> Result<RunCommand> {
        self.plane
            .store
            .read(|s| s.commands.get(command_id).cloned())
            .ok_or_else(|| Error::not_found(format!("command {command_id}")))
    }

    pub fn commands_for(&self, node_id: &Id) -> Vec<RunCommand> {
        self.plane
            .store
            .read(|s| s.commands.values().filter(|c| &c.node_id == node_id).cloned().collect())
    }

    /// Records a command's terminal result. The first report wins; repeats
    /// get ALREADY_TERMINAL.
    pub fn report_result(&self, token: &str, req: &ResultRequest) -> Result<ResultAck> {
        let now = self.plane.clock.now();
        let cfg = self.cfg().clone();
        self.plane.store.write(|tx| {
            let node_id = agent_for_token(tx, token)?.node_id.clone();
            let cmd = tx
                .commands
                .get(&req.command_id)
                .filter(|c| c.node_id == node_id)
                .cloned()
                .ok_or_else(|| Error::new(ErrorCode::UnknownCommand, format!("command {} not known for this node", req.command_id)))?;
            if cmd.status.is_terminal() {
                return Err(Error::new(ErrorCode::AlreadyTerminal, "result already recorded"));
            }
            if cmd.status != CommandStatus::Delivered {
                return Err(Error::new(ErrorCode::UnknownCommand, "command was never delivered"));
            }
            let status = match (req.outcome, req.exit_status) {
                (ResultOutcome::Exited, Some(0)) => CommandStatus::Succeeded,
                (ResultOutcome::TimedOut, _) => CommandStatus::TimedOut,
                _ => CommandStatus::Failed,
            };
            let cmd = finish_command(tx, &cfg, cmd, status, req.exit_status, req.output.clone(), req.error_code.clone(), now);
            crate::sessions::on_command_result(tx, &self.plane.ids, &cfg, &cmd, req.access_url.as_deref(), now)?;
            Ok(ResultAck {
                acknowledged: true,
                command_id: cmd.command_id,
            })
        })
    }

    pub fn agent(&self, node_id: &Id) -> Option<AgentRecord> {
        self.plane.store.read(|s| s.agents.get(node_id).cloned())
    }

    pub fn liveness(&self, node_id: &Id) -> Option<Liveness> {
        let now = self.plane.clock.now();
        self.plane
            .store
            .read(|s| s.agents.get(node_id).map(|a| liveness_for(self.cfg(), now, a)))
    }

    pub fn fleet_dashboard(&self) -> Vec<FleetEntry> {
        let now = self.plane.clock.now();
        let cfg = self.cfg();
        self.plane.store.read(|s| {
            s.live_nodes()
                .filter(|n| {
                    matches!(n.federation_state, FederationState::Federated | FederationState::Offline)
                        || s.agents.contains_key(&n.node_id)
                })
                .filter_map(|node| {
                    let testbed = s.testbeds.get(&node.testbed_id)?;
                    let lab = s.labs.get(&testbed.lab_id)?;
                    let agent = s.agents.get(&node.node_id);
                    let liveness = agent.map(|a| liveness_for(cfg, now, a));
                    let age = agent.map(|a| (now - a.last_heartbeat_at).num_seconds());
                    let stale = liveness == Some(Liveness::Offline)
                        && age.is_some_and(|a| a >= cfg.stale_after_days * 86_400);
                    Some(FleetEntry {
                        node_id: node.node_id.clone(),
                        public_identifier: node.public_identifier.clone(),
                        namespace: node.namespace.clone(),
                        federation_state: node.federation_state,
                        testbed_id: testbed.testbed_id.clone(),
                        testbed_name: testbed.public_name.clone(),
                        lab_id: lab.lab_id.clone(),
                        lab_name: lab.name.clone(),
                        liveness,
                        last_heartbeat_at: agent.map(|a| a.last_heartbeat_at),
                        heartbeat_age_s: age,
                        metrics: agent.map(|a| a.metrics).unwrap_or_default(),
                        agent_version: agent.map(|a| a.agent_version.clone()),
                        pending_commands: s
                            .open_commands_for(&node.node_id)
                            .filter(|c| c.status == CommandStatus::Queued)
                            .count(),
                        running_sessions: agent.map_or(0, |a| a.running_sessions.len()),
                        stale,
                    })
                })
                .collect()
        })
    }

    /// Recomputes liveness for every agent and times out DELIVERED commands
    /// whose deadline has passed. Returns the number of records changed.
    pub fn sweep(&self) -> Result<usize> {
        let now = self.plane.clock.now();
        let cfg = self.cfg().clone();
        self.plane.store.write(|tx| {
            let mut changed = 0;
            let agents: Vec<AgentRecord> = tx.agents.values().cloned().collect();
            for mut agent in agents {
                let live = liveness_for(&cfg, now, &agent);
                if live != agent.liveness {
                    agent.liveness = live;
                    let node_id = agent.node_id.clone();
                    tx.put(agent);
                    changed += 1;
                    let node_state = tx.nodes.get(&node_id).map(|n| n.federation_state);
                    if live == Liveness::Offline && node_state == Some(FederationState::Federated) {
                        transition_node(tx, &node_id, FederationState::Offline)?;
                        tracing::warn!(node_id = %node_id, "node went offline");
                    }
                }
            }
            let overdue: Vec<RunCommand> = tx
                .commands
                .values()
                .filter(|c| c.status == CommandStatus::Delivered)
                .filter(|c| {
                    c.delivered_at.is_some_and(|d| {
                        now >= d + Duration::seconds(c.timeout_s as i64 + cfg.command_grace_s)
                    })
                })
                .cloned()
                .collect();
            for cmd in overdue {
                let cmd = finish_command(
                    tx,
                    &cfg,
                    cmd,
                    CommandStatus::TimedOut,
                    None,
                    "no result reported before the deadline".into(),
                    None,
                    now,
                );
                crate::sessions::on_command_result(tx, &self.plane.ids, &cfg, &cmd, None, now)?;
                changed += 1;
            }
            Ok(changed)
        })
    }
}

pub(crate) fn issue_activation_tx(
    tx: &mut Tx<'_>,
    ids: &IdGenerator,
    cfg: &PlaneConfig,
    node_id: &Id,
    now: DateTime<Utc>,
) -> Result<ActivationRecord> {
    let node = tx
        .nodes
        .get(node_id)
        .filter(|n| n.deleted_at.is_none())
        .ok_or_else(|| Error::not_found(format!("node {node_id}")))?;
    if node.federation_state == FederationState::Federated {
        return Err(Error::new(ErrorCode::IllegalState, "node is already federated"));
    }
    let prior: Vec<ActivationRecord> = tx
        .activations
        .values()
        .filter(|a| &a.node_id == node_id && !a.consumed && !a.revoked)
        .cloned()
        .collect();
    for mut a in prior {
        a.revoked = true;
        tx.put(a);
    }
    let activation = ActivationRecord {
        activation_id: ids.next_id(),
        activation_code: new_secret(),
        node_id: node_id.clone(),
        issued_at: now,
        expires_at: now + Duration::seconds(cfg.activation_ttl_s),
        consumed: false,
        consumed_at: None,
        revoked: false,
    };
    tx.put(activation.clone());
    transition_node(tx, node_id, FederationState::ActivationIssued)?;
    Ok(activation)
}

pub(crate) fn generate_script_tx(
    tx: &mut Tx<'_>,
    cfg: &PlaneConfig,
    node_id: &Id,
    now: DateTime<Utc>,
) -> Result<DeploymentScript> {
    let node = tx
        .nodes
        .get(node_id)
        .filter(|n| n.deleted_at.is_none())
        .cloned()
        .ok_or_else(|| Error::not_found(format!("node {node_id}")))?;
    let latest = tx
        .activations
        .values()
        .filter(|a| &a.node_id == node_id && !a.revoked)
        .max_by(|a, b| a.activation_id.cmp(&b.activation_id))
        .cloned();
    let activation = match latest {
        Some(a) if a.consumed => return Err(Error::new(ErrorCode::NoActivation, "activation already consumed")),
        Some(_) if node.federation_state != FederationState::ActivationIssued => {
            return Err(Error::new(ErrorCode::NoActivation, "node has no pending activation"))
        }
        Some(a) if now >= a.expires_at => return Err(Error::new(ErrorCode::Expired, "activation expired")),
        Some(a) => a,
        None => return Err(Error::new(ErrorCode::NoActivation, "node has no activation")),
    };
    let server_url = cfg.public_url.trim_end_matches('/');
    let download_url = cfg
        .agent_download_url
        .clone()
        .unwrap_or_else(|| format!("{server_url}/dist/fedplane-agent"));
    let script_text = script::render(&script::ScriptParams {
        server_url,
        download_url: &download_url,
        node_id: node.node_id.as_str(),
        public_identifier: &node.public_identifier,
        activation_id: activation.activation_id.as_str(),
        activation_code: &activation.activation_code,
    });
    let checksum = script::checksum(&script_text);
    tx.put(ScriptRecord {
        node_id: node.node_id.clone(),
        activation_id: activation.activation_id.clone(),
        checksum: checksum.clone(),
        generated_at: now,
    });
    Ok(DeploymentScript {
        node_id: node.node_id,
        activation_id: activation.activation_id,
        script_text,
        checksum,
        generated_at: now,
    })
}
