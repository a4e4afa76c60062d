//! Remote sessions: resolve a node's container image, have its agent start
//! it, and hand the user the access link. Access latency is measured from
//! the connect request to the agent's URL report.

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::config::PlaneConfig;
use crate::context::{link, owning_lab, FederationState, Relation, Role, UserRecord};
use crate::error::{Error, ErrorCode, Result};
use crate::federation::{compute_liveness, finish_command, queue_command, CommandAction, CommandStatus, Liveness, RunCommand};
use crate::ids::{Id, IdGenerator};
use crate::scheduler::{access_check_tx, ReservationStatus};
use crate::store::{State, Tx};
use crate::ControlPlane;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BindingTarget {
    Node,
    Testbed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBinding {
    pub target_id: Id,
    pub target: BindingTarget,
    pub image_ref: String,
    #[serde(default)]
    pub description: String,
    pub bound_by: Id,
    pub bound_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Requested,
    Deploying,
    Ready,
    Ended,
    Failed,
}

impl SessionState {
    pub fn is_live(self) -> bool {
        matches!(self, SessionState::Requested | SessionState::Deploying | SessionState::Ready)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: Id,
    pub reservation_id: Id,
    pub user_id: Id,
    pub node_id: Id,
    pub image_ref: String,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_url: Option<String>,
    pub requested_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ready_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ended_at: Option<DateTime<Utc>>,
    /// `ready_at - requested_at` in milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_latency_ms: Option<i64>,
    pub start_command_id: Id,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_command_id: Option<Id>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Session {
    pub fn access_latency_s(&self) -> Option<f64> {
        self.access_latency_ms.map(|ms| ms as f64 / 1000.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SessionFilter {
    pub node_id: Option<Id>,
    pub testbed_id: Option<Id>,
    pub user_id: Option<Id>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub average_s: Option<f64>,
    pub maximum_s: Option<f64>,
    pub minimum_s: Option<f64>,
}

impl LatencyStats {
    /// Exact aggregate over millisecond samples.
    pub fn from_millis(samples: &[i64]) -> Self {
        if samples.is_empty() {
            return LatencyStats {
                count: 0,
                average_s: None,
                maximum_s: None,
                minimum_s: None,
            };
        }
        let sum: i128 = samples.iter().map(|&v| v as i128).sum();
        LatencyStats {
            count: samples.len(),
            average_s: Some(sum as f64 / samples.len() as f64 / 1000.0),
            maximum_s: samples.iter().max().map(|&v| v as f64 / 1000.0),
            minimum_s: samples.iter().min().map(|&v| v as f64 / 1000.0),
        }
    }
}

fn session_matches(state: &State, s: &Session, f: &SessionFilter) -> bool {
    f.node_id.as_ref().is_none_or(|n| &s.node_id == n)
        && f.user_id.as_ref().is_none_or(|u| &s.user_id == u)
        && f.testbed_id.as_ref().is_none_or(|t| {
            state.nodes.get(&s.node_id).is_some_and(|n| &n.testbed_id == t)
        })
}

/// Image for a node: a node binding wins over its testbed's binding.
pub fn resolve_image<'s>(state: &'s State, node_id: &Id) -> Option<&'s ImageBinding> {
    state.bindings.get(node_id).or_else(|| {
        let testbed = &state.nodes.get(node_id)?.testbed_id;
        state.bindings.get(testbed)
    })
}

pub(crate) fn on_command_delivered(tx: &mut Tx<'_>, cmd: &RunCommand, _now: DateTime<Utc>) {
    if let CommandAction::StartSession { session_id, .. } = &cmd.action {
        if let Some(mut s) = tx.sessions.get(session_id).cloned() {
            if s.state == SessionState::Requested {
                s.state = SessionState::Deploying;
                tx.put(s);
            }
        }
    }
}

pub(crate) fn on_command_result(
    tx: &mut Tx<'_>,
    ids: &IdGenerator,
    cfg: &PlaneConfig,
    cmd: &RunCommand,
    access_url: Option<&str>,
    now: DateTime<Utc>,
) -> Result<()> {
    let CommandAction::StartSession { session_id, .. } = &cmd.action else {
        return Ok(());
    };
    let Some(mut s) = tx.sessions.get(session_id).cloned() else {
        return Ok(());
    };
    let started = cmd.status == CommandStatus::Succeeded && access_url.is_some();
    match s.state {
        SessionState::Requested | SessionState::Deploying => {
            if started {
                let latency = (now - s.requested_at).num_milliseconds().max(1);
                s.state = SessionState::Ready;
                s.access_url = access_url.map(str::to_string);
                s.ready_at = Some(now);
                s.access_latency_ms = Some(latency);
                tracing::info!(session_id = %s.session_id, latency_ms = latency, "session ready");
            } else {
                s.state = SessionState::Failed;
                s.ended_at = Some(now);
                s.failure = Some(format!(
                    "{}: {}",
                    cmd.error_code.as_deref().unwrap_or(ErrorCode::DeployFailed.as_str()),
                    cmd.output.as_deref().unwrap_or("").trim()
                ));
            }
            tx.put(s);
        }
        SessionState::Ended | SessionState::Failed => {
            // Ended or timed out while deploying: the container came up
            // anyway, so take it down again.
            if started && s.stop_command_id.is_none() {
                let stop = queue_command(tx, ids, cfg, &s.node_id, CommandAction::StopSession { session_id: s.session_id.clone() }, 60, now)?;
                s.stop_command_id = Some(stop.command_id);
                tx.put(s);
            }
        }
        SessionState::Ready => {}
    }
    Ok(())
}

/// Ends a session locally and queues the agent-side teardown.
fn end_session_tx(
    tx: &mut Tx<'_>,
    ids: &IdGenerator,
    cfg: &PlaneConfig,
    mut s: Session,
    now: DateTime<Utc>,
) -> Result<Session> {
    if !s.state.is_live() {
        return Ok(s);
    }
    let start = tx.commands.get(&s.start_command_id).cloned();
    match start {
        Some(cmd) if cmd.status == CommandStatus::Queued => {
            finish_command(tx, cfg, cmd, CommandStatus::Failed, None, "cancelled before delivery".into(), None, now);
        }
        _ => {
            let node_online = tx
                .nodes
                .get(&s.node_id)
                .is_some_and(|n| matches!(n.federation_state, FederationState::Federated | FederationState::Offline));
            if node_online && s.stop_command_id.is_none() {
                let stop = queue_command(
                    tx,
                    ids,
                    cfg,
                    &s.node_id,
                    CommandAction::StopSession { session_id: s.session_id.clone() },
                    60,
                    now,
                )?;
                s.stop_command_id = Some(stop.command_id);
            }
        }
    }
    s.state = SessionState::Ended;
    s.ended_at = Some(now);
    tx.put(s.clone());
    Ok(s)
}

pub(crate) fn end_sessions_for_reservation(
    tx: &mut Tx<'_>,
    ids: &IdGenerator,
    cfg: &PlaneConfig,
    reservation_id: &Id,
    now: DateTime<Utc>,
) -> Result<()> {
    let live: Vec<Session> = tx
        .sessions
        .values()
        .filter(|s| &s.reservation_id == reservation_id && s.state.is_live())
        .cloned()
        .collect();
    for s in live {
        end_session_tx(tx, ids, cfg, s, now)?;
    }
    Ok(())
}

pub struct Sessions<'a> {
    pub(crate) plane: &'a ControlPlane,
}

impl Sessions<'_> {
    /// Starts a session on `node_id`. The returned session is REQUESTED;
    /// it becomes READY once the node's agent reports the access URL.
    pub fn connect(&self, user: &UserRecord, node_id: &Id) -> Result<Session> {
        let now = self.plane.clock.now();
        let cfg = &self.plane.config;
        let ids = &self.plane.ids;
        self.plane.store.write(|tx| {
            let node = tx
                .nodes
                .get(node_id)
                .filter(|n| n.deleted_at.is_none())
                .cloned()
                .ok_or_else(|| Error::not_found(format!("node {node_id}")))?;
            let decision = access_check_tx(tx, ids, cfg, &user.user_id, node_id, now, now);
            let Some(reservation_id) = decision.reservation_id.filter(|_| decision.allowed) else {
                return Err(Error::new(ErrorCode::NotAuthorized, "no reservation covers this node now"));
            };
            let online = node.federation_state == FederationState::Federated
                && tx.agents.get(node_id).is_some_and(|a| {
                    compute_liveness(now, a.last_heartbeat_at, cfg.heartbeat_interval_s, cfg.degraded_after_missed, cfg.offline_after_missed)
                        != Liveness::Offline
                });
            if !online {
                return Err(Error::new(ErrorCode::NodeOffline, "node agent is offline"));
            }
            let image_ref = resolve_image(tx, node_id)
                .map(|b| b.image_ref.clone())
                .ok_or_else(|| Error::new(ErrorCode::NoImageBinding, "no container image bound to this node or its testbed"))?;
            let live = tx.sessions.values().filter(|s| &s.node_id == node_id && s.state.is_live()).count();
            if live >= cfg.max_sessions_per_node {
                return Err(Error::new(ErrorCode::Capacity, "node already has an active session"));
            }
            let session_id = ids.next_id();
            let start = queue_command(
                tx,
                ids,
                cfg,
                node_id,
                CommandAction::StartSession {
                    session_id: session_id.clone(),
                    image_ref: image_ref.clone(),
                    port_hint: None,
                },
                cfg.deploy_timeout_s.max(1) as u64,
                now,
            )?;
            let session = Session {
                session_id: session_id.clone(),
                reservation_id,
                user_id: user.user_id.clone(),
                node_id: node_id.clone(),
                image_ref,
                state: SessionState::Requested,
                access_url: None,
                requested_at: now,
                ready_at: None,
                ended_at: None,
                access_latency_ms: None,
                start_command_id: start.command_id,
                stop_command_id: None,
                failure: None,
            };
            tx.put(session.clone());
            link(tx, &session_id, node_id, Relation::SessionOnNode)?;
            Ok(session)
        })
    }

    /// Ends a session. Already-ended sessions return unchanged.
    pub fn disconnect(&self, session_id: &Id, requester: &UserRecord) -> Result<Session> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            let s = tx
                .sessions
                .get(session_id)
                .cloned()
                .ok_or_else(|| Error::not_found(format!("session {session_id}")))?;
            if s.user_id != requester.user_id && requester.role != Role::Admin {
                return Err(Error::new(ErrorCode::Forbidden, "only the session owner or an admin may disconnect"));
            }
            end_session_tx(tx, &self.plane.ids, &self.plane.config, s, now)
        })
    }

    pub fn get(&self, session_id: &Id) -> Result<Session> {
        self.plane
            .store
            .read(|s| s.sessions.get(session_id).cloned())
            .ok_or_else(|| Error::not_found(format!("session {session_id}")))
    }

    pub fn list(&self, filter: &SessionFilter) -> Vec<Session> {
        self.plane.store.read(|state| {
            state
                .sessions
                .values()
                .filter(|s| session_matches(state, s, filter))
                .cloned()
                .collect()
        })
    }

    /// Binds a container image to a node or testbed. Only the owner of the
    /// lab containing the target (or an admin) may do this.
    pub fn bind_image(&self, requester: &UserRecord, target_id: &Id, image_ref: &str, description: &str) -> Result<ImageBinding> {
        if image_ref.trim().is_empty() {
            return Err(Error::new(ErrorCode::Validation, "image_ref is required").with_details(vec!["image_ref".into()]));
        }
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            let target = if tx.nodes.get(target_id).is_some_and(|n| n.deleted_at.is_none()) {
                BindingTarget::Node
            } else if tx.testbeds.get(target_id).is_some_and(|t| t.deleted_at.is_none()) {
                BindingTarget::Testbed
            } else {
                return Err(Error::not_found(format!("node or testbed {target_id}")));
            };
            let owner = owning_lab(tx, target_id).map(|l| l.owner_user_id.clone());
            if requester.role != Role::Admin && owner.as_ref() != Some(&requester.user_id) {
                return Err(Error::new(ErrorCode::Forbidden, "only the lab owner may bind images"));
            }
            let binding = ImageBinding {
                target_id: target_id.clone(),
                target,
                image_ref: image_ref.trim().to_string(),
                description: description.to_string(),
                bound_by: requester.user_id.clone(),
                bound_at: now,
            };
            tx.put(binding.clone());
            Ok(binding)
        })
    }

    pub fn resolve_image(&self, node_id: &Id) -> Option<ImageBinding> {
        self.plane.store.read(|s| resolve_image(s, node_id).cloned())
    }

    pub fn latency_stats(&self, filter: &SessionFilter) -> LatencyStats {
        let samples: Vec<i64> = self
            .list(filter)
            .iter()
            .filter(|s| matches!(s.state, SessionState::Ready | SessionState::Ended))
            .filter_map(|s| s.access_latency_ms)
            .collect();
        LatencyStats::from_millis(&samples)
    }

    /// CSV export: `session_id,node_id,requested_at,ready_at,latency_s`.
    pub fn latency_csv(&self, filter: &SessionFilter) -> String {
        let mut out = String::from("session_id,node_id,requested_at,ready_at,latency_s\n");
        for s in self.list(filter) {
            let (Some(ready), Some(ms)) = (s.ready_at, s.access_latency_ms) else { continue };
            out.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                s.session_id,
                s.node_id,
                s.requested_at.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                ready.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                ms as f64 / 1000.0
            ));
        }
        out
    }

    /// Fails sessions stuck deploying and tears down sessions whose
    /// reservation ended more than the grace period ago.
    pub fn sweep(&self) -> Result<usize> {
        let now = self.plane.clock.now();
        let cfg = &self.plane.config;
        self.plane.store.write(|tx| {
            let mut changed = 0;
            let deadline = Duration::seconds(cfg.deploy_timeout_s);
            let stuck: Vec<Session> = tx
                .sessions
                .values()
                .filter(|s| matches!(s.state, SessionState::Requested | SessionState::Deploying))
                .filter(|s| now >= s.requested_at + deadline)
                .cloned()
                .collect();
            for mut s in stuck {
                s.state = SessionState::Failed;
                s.ended_at = Some(now);
                s.failure = Some(format!("{}: deployment timed out", ErrorCode::DeployFailed.as_str()));
                tx.put(s);
                changed += 1;
            }
            let grace = Duration::seconds(cfg.session_teardown_grace_s);
            let expired: Vec<Session> = tx
                .sessions
                .values()
                .filter(|s| s.state == SessionState::Ready)
                .filter(|s| {
                    tx.reservations.get(&s.reservation_id).is_some_and(|r| {
                        r.status == ReservationStatus::Cancelled || now >= r.end_at + grace
                    })
                })
                .cloned()
                .collect();
            for s in expired {
                end_session_tx(tx, &self.plane.ids, cfg, s, now)?;
                changed += 1;
            }
            Ok(changed)
        })
    }
}
