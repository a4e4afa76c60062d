//! JSON bodies of the agent protocol (`/v1/agent/*`) shared by the gateway
//! and the edge agent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::federation::{AgentMetrics, CommandAction, Liveness};
use crate::ids::Id;

/// `POST /v1/agent/enroll`
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollRequest {
    pub activation_id: String,
    pub activation_code: String,
    pub agent_version: String,
    #[serde(default)]
    pub host_facts: BTreeMap<String, String>,
}

impl std::fmt::Debug for EnrollRequest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnrollRequest")
            .field("activation_id", &self.activation_id)
            .field("activation_code", &"<redacted>")
            .field("agent_version", &self.agent_version)
            .finish()
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollGrant {
    pub node_id: Id,
    pub agent_token: String,
}

impl std::fmt::Debug for EnrollGrant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnrollGrant")
            .field("node_id", &self.node_id)
            .field("agent_token", &"<redacted>")
            .finish()
    }
}

/// `POST /v1/agent/heartbeat`
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatRequest {
    #[serde(default)]
    pub metrics: AgentMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_version: Option<String>,
    /// Sessions the agent currently has RUNNING.
    #[serde(default)]
    pub running_sessions: Vec<Id>,
}

/// A command as delivered to an agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEnvelope {
    pub command_id: Id,
    pub action: CommandAction,
    pub timeout_s: u64,
    /// True when the command was already delivered once without a result.
    #[serde(default)]
    pub redelivery: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeartbeatResponse {
    pub acknowledged: bool,
    pub liveness: Liveness,
    pub commands: Vec<CommandEnvelope>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResultOutcome {
    /// The process ran to completion; see `exit_status`.
    Exited,
    TimedOut,
    /// The command could not be started at all.
    SpawnFailed,
}

/// `POST /v1/agent/result`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRequest {
    pub command_id: Id,
    pub outcome: ResultOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    #[serde(default)]
    pub output: String,
    /// Set for a successful session start.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_url: Option<String>,
    /// Machine-readable agent error (CAPACITY, IMAGE_UNAVAILABLE, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultAck {
    pub acknowledged: bool,
    pub command_id: Id,
}

/// Error envelope returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: String,
    pub message: String,
    #[serde(default)]
    pub details: Vec<String>,
}
