//! Reservation validation and the master resource schedule.
//!
//! Intervals are half-open `[start_at, end_at)`: back-to-back bookings on
//! the same node do not conflict.

use std::collections::BTreeSet;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::config::PlaneConfig;
use crate::context::{link, FederationState, Relation, Role, UserRecord};
use crate::error::{Error, ErrorCode, Result};
use crate::ids::{Id, IdGenerator};
use crate::store::{State, Tx};
use crate::ControlPlane;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReservationStatus {
    Active,
    Cancelled,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub reservation_id: Id,
    pub user_id: Id,
    /// Sorted, deduplicated, nonempty.
    pub node_ids: Vec<Id>,
    pub start_at: DateTime<Utc>,
    pub end_at: DateTime<Utc>,
    pub status: ReservationStatus,
    pub created_at: DateTime<Utc>,
    /// Created implicitly by an instant-access check.
    #[serde(default)]
    pub instant: bool,
}

impl Reservation {
    pub fn overlaps(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> bool {
        self.start_at < end && start < self.end_at
    }

    pub fn covers(&self, at: DateTime<Utc>) -> bool {
        self.start_at <= at && at < self.end_at
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessDecision {
    pub allowed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reservation_id: Option<Id>,
    #[serde(default)]
    pub auto_created: bool,
}

impl AccessDecision {
    fn denied() -> Self {
        AccessDecision {
            allowed: false,
            reservation_id: None,
            auto_created: false,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn create_reservation_tx(
    tx: &mut Tx<'_>,
    ids: &IdGenerator,
    cfg: &PlaneConfig,
    user_id: &Id,
    node_ids: &[Id],
    start_at: DateTime<Utc>,
    end_at: DateTime<Utc>,
    now: DateTime<Utc>,
    instant: bool,
) -> Result<Reservation> {
    let node_ids: Vec<Id> = node_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if node_ids.is_empty() {
        return Err(Error::new(ErrorCode::Validation, "at least one node is required").with_details(vec!["node_ids".into()]));
    }
    if start_at >= end_at {
        return Err(Error::new(ErrorCode::BadInterval, "start_at must precede end_at"));
    }
    if end_at <= now {
        return Err(Error::new(ErrorCode::BadInterval, "interval lies entirely in the past"));
    }
    if end_at - start_at > Duration::seconds(cfg.max_reservation_s) {
        return Err(Error::new(
            ErrorCode::TooLong,
            format!("reservations are limited to {} s", cfg.max_reservation_s),
        ));
    }
    if !tx.users.contains_key(user_id) {
        return Err(Error::not_found(format!("user {user_id}")));
    }
    for node_id in &node_ids {
        let node = tx
            .nodes
            .get(node_id)
            .filter(|n| n.deleted_at.is_none())
            .ok_or_else(|| Error::not_found(format!("node {node_id}")))?;
        if node.federation_state != FederationState::Federated {
            return Err(Error::new(
                ErrorCode::NodeNotFederated,
                format!("node {node_id} is {}", node.federation_state.as_str()),
            ));
        }
    }
    let conflicts = conflicting(tx, &node_ids, start_at, end_at);
    if !conflicts.is_empty() {
        return Err(Error::new(ErrorCode::Conflict, "requested interval overlaps existing reservations")
            .with_details(conflicts.into_iter().map(|id| id.to_string()).collect()));
    }
    let reservation = Reservation {
        reservation_id: ids.next_id(),
        user_id: user_id.clone(),
        node_ids,
        start_at,
        end_at,
        status: ReservationStatus::Active,
        created_at: now,
        instant,
    };
    tx.put(reservation.clone());
    for node_id in &reservation.node_ids {
        link(tx, &reservation.reservation_id, node_id, Relation::ReservationOnNode)?;
    }
    Ok(reservation)
}

/// IDs of ACTIVE reservations overlapping `[start, end)` on any of `nodes`.
pub fn conflicting(state: &State, nodes: &[Id], start: DateTime<Utc>, end: DateTime<Utc>) -> Vec<Id> {
    let mut out = BTreeSet::new();
    for node in nodes {
        for r in state.active_reservations_on(node) {
            if r.overlaps(start, end) {
                out.insert(r.reservation_id.clone());
            }
        }
    }
    out.into_iter().collect()
}

pub(crate) fn access_check_tx(
    tx: &mut Tx<'_>,
    ids: &IdGenerator,
    cfg: &PlaneConfig,
    user_id: &Id,
    node_id: &Id,
    at: DateTime<Utc>,
    now: DateTime<Utc>,
) -> AccessDecision {
    let mut next_start: Option<DateTime<Utc>> = None;
    for r in tx.active_reservations_on(node_id) {
        if r.covers(at) {
            return if &r.user_id == user_id {
                AccessDecision {
                    allowed: true,
                    reservation_id: Some(r.reservation_id.clone()),
                    auto_created: false,
                }
            } else {
                AccessDecision::denied()
            };
        }
        if r.start_at > at {
            next_start = Some(next_start.map_or(r.start_at, |n| n.min(r.start_at)));
        }
    }
    if !cfg.instant_access {
        return AccessDecision::denied();
    }
    let mut end = at + Duration::seconds(cfg.instant_window_s);
    if let Some(next) = next_start {
        end = end.min(next);
    }
    match create_reservation_tx(tx, ids, cfg, user_id, std::slice::from_ref(node_id), at, end, now, true) {
        Ok(r) => AccessDecision {
            allowed: true,
            reservation_id: Some(r.reservation_id),
            auto_created: true,
        },
        Err(_) => AccessDecision::denied(),
    }
}

/// Reservations on `node_id` (excluding cancelled ones) that intersect the
/// half-open window, sorted by start time.
pub fn schedule_for(
    state: &State,
    node_id: &Id,
    window: Option<(DateTime<Utc>, DateTime<Utc>)>,
) -> Vec<Reservation> {
    let mut out: Vec<Reservation> = state
        .edges_of(node_id)
        .into_iter()
        .filter(|e| e.relation == Relation::ReservationOnNode && &e.to_id == node_id)
        .filter_map(|e| state.reservations.get(&e.from_id))
        .filter(|r| r.status != ReservationStatus::Cancelled)
        .filter(|r| window.is_none_or(|(from, to)| r.overlaps(from, to)))
        .cloned()
        .collect();
    out.sort_by(|a, b| (a.start_at, &a.reservation_id).cmp(&(b.start_at, &b.reservation_id)));
    out
}

/// Plain-text calendar listing of a schedule.
pub fn render_listing(node_id: &Id, reservations: &[Reservation]) -> String {
    let fmt = |t: DateTime<Utc>| t.format("%Y%m%dT%H%M%SZ").to_string();
    let mut out = String::from("BEGIN:VCALENDAR\r\nVERSION:2.0\r\nPRODID:-//fedplane//schedule//EN\r\n");
    out.push_str(&format!("X-NODE-ID:{node_id}\r\n"));
    for r in reservations {
        out.push_str("BEGIN:VEVENT\r\n");
        out.push_str(&format!("UID:{}\r\n", r.reservation_id));
        out.push_str(&format!("DTSTART:{}\r\n", fmt(r.start_at)));
        out.push_str(&format!("DTEND:{}\r\n", fmt(r.end_at)));
        out.push_str(&format!("STATUS:{}\r\n", serde_json::to_value(r.status).unwrap().as_str().unwrap_or("")));
        out.push_str(&format!("X-USER-ID:{}\r\n", r.user_id));
        out.push_str("END:VEVENT\r\n");
    }
    out.push_str("END:VCALENDAR\r\n");
    out
}

pub struct Scheduler<'a> {
    pub(crate) plane: &'a ControlPlane,
}

impl Scheduler<'_> {
    pub fn create_reservation(
        &self,
        user_id: &Id,
        node_ids: &[Id],
        start_at: DateTime<Utc>,
        end_at: DateTime<Utc>,
    ) -> Result<Reservation> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            create_reservation_tx(tx, &self.plane.ids, &self.plane.config, user_id, node_ids, start_at, end_at, now, false)
        })
    }

    /// Cancels an ACTIVE reservation and tears down its live sessions.
    pub fn cancel_reservation(&self, reservation_id: &Id, requester: &UserRecord) -> Result<Reservation> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            let mut r = tx
                .reservations
                .get(reservation_id)
                .cloned()
                .ok_or_else(|| Error::not_found(format!("reservation {reservation_id}")))?;
            if r.user_id != requester.user_id && requester.role != Role::Admin {
                return Err(Error::new(ErrorCode::Forbidden, "only the owner or an admin may cancel"));
            }
            if r.status != ReservationStatus::Active {
                return Err(Error::new(ErrorCode::AlreadyTerminal, "reservation is no longer active"));
            }
            r.status = ReservationStatus::Cancelled;
            tx.put(r.clone());
            crate::sessions::end_sessions_for_reservation(tx, &self.plane.ids, &self.plane.config, reservation_id, now)?;
            Ok(r)
        })
    }

    pub fn get_reservation(&self, reservation_id: &Id) -> Result<Reservation> {
        self.plane
            .store
            .read(|s| s.reservations.get(reservation_id).cloned())
            .ok_or_else(|| Error::not_found(format!("reservation {reservation_id}")))
    }

    pub fn reservations_for_user(&self, user_id: Option<&Id>) -> Vec<Reservation> {
        self.plane.store.read(|s| {
            s.reservations
                .values()
                .filter(|r| user_id.is_none_or(|u| &r.user_id == u))
                .cloned()
                .collect()
        })
    }

    pub fn get_schedule(
        &self,
        node_id: &Id,
        window: Option<(DateTime<Utc>, DateTime<Utc>)>,
    ) -> Result<Vec<Reservation>> {
        self.plane.store.read(|s| {
            if !s.nodes.get(node_id).is_some_and(|n| n.deleted_at.is_none()) {
                return Err(Error::not_found(format!("node {node_id}")));
            }
            Ok(schedule_for(s, node_id, window))
        })
    }

    /// Whether `user_id` may use `node_id` at `at`. With instant access
    /// enabled, an unreserved node yields an automatically created
    /// reservation for the instant window (shortened to end at the next
    /// booking, if any).
    pub fn access_check(&self, user_id: &Id, node_id: &Id, at: DateTime<Utc>) -> AccessDecision {
        let now = self.plane.clock.now();
        self.plane
            .store
            .write(|tx| Ok(access_check_tx(tx, &self.plane.ids, &self.plane.config, user_id, node_id, at, now)))
            .unwrap_or_else(|_| AccessDecision::denied())
    }

    /// Marks reservations past their end as COMPLETED.
    pub fn sweep(&self) -> Result<usize> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            let done: Vec<Reservation> = tx
                .reservations
                .values()
                .filter(|r| r.status == ReservationStatus::Active && r.end_at <= now)
                .cloned()
                .collect();
            let n = done.len();
            for mut r in done {
                r.status = ReservationStatus::Completed;
                tx.put(r);
            }
            Ok(n)
        })
    }
}
