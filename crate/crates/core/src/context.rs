//! Context manager: labs, testbeds, nodes, users and the association graph
//! linking them to reservations, sessions and artifacts.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::ids::Id;
use crate::slug::{slugify, unique_slug};
use crate::store::{Record, State, Tx};
use crate::ControlPlane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabRecord {
    pub lab_id: Id,
    pub name: String,
    pub slug: String,
    pub owner_user_id: Id,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedRecord {
    pub testbed_id: Id,
    pub lab_id: Id,
    pub public_name: String,
    pub slug: String,
    pub description: String,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub kind: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlMode {
    Centralized,
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FederationState {
    Registered,
    ActivationIssued,
    Federated,
    Offline,
}

impl FederationState {
    /// The allowed transition graph. `Offline -> ActivationIssued` exists so
    /// a node whose agent was reinstalled can be re-enrolled with a fresh
    /// activation; `ActivationIssued -> ActivationIssued` is a re-issue.
    pub fn can_transition(self, to: FederationState) -> bool {
        use FederationState::*;
        matches!(
            (self, to),
            (Registered, ActivationIssued)
                | (ActivationIssued, ActivationIssued)
                | (ActivationIssued, Federated)
                | (Federated, Offline)
                | (Offline, Federated)
                | (Offline, ActivationIssued)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FederationState::Registered => "REGISTERED",
            FederationState::ActivationIssued => "ACTIVATION_ISSUED",
            FederationState::Federated => "FEDERATED",
            FederationState::Offline => "OFFLINE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            FederationState::Registered,
            FederationState::ActivationIssued,
            FederationState::Federated,
            FederationState::Offline,
        ]
        .into_iter()
        .find(|st| st.as_str().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: Id,
    pub testbed_id: Id,
    pub public_identifier: String,
    pub device_descriptors: Vec<DeviceDescriptor>,
    pub control_mode: ControlMode,
    pub federation_state: FederationState,
    /// Assigned on the first transition to FEDERATED and kept thereafter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub namespace: Option<String>,
    pub state_history: Vec<FederationState>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    NodeInTestbed,
    TestbedInLab,
    ArtifactForNode,
    SessionOnNode,
    ReservationOnNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AssociationEdge {
    pub from_id: Id,
    pub to_id: Id,
    pub relation: Relation,
}

impl AssociationEdge {
    pub fn new(from_id: Id, to_id: Id, relation: Relation) -> Self {
        AssociationEdge {
            from_id,
            to_id,
            relation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Experimenter,
    Owner,
    Admin,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s.to_ascii_uppercase().as_str() {
            "EXPERIMENTER" => Some(Role::Experimenter),
            "OWNER" => Some(Role::Owner),
            "ADMIN" => Some(Role::Admin),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: Id,
    pub username: String,
    /// PHC-format salted hash. Plaintext credentials are never stored.
    pub credential_hash: String,
    pub role: Role,
    pub created_at: DateTime<Utc>,
}

/// Input to [`ContextStore::put_entity`]. IDs, slugs and timestamps are
/// assigned by the server.
#[derive(Debug, Clone)]
pub enum NewEntity {
    Lab {
        name: String,
        owner_user_id: Id,
    },
    Testbed {
        lab_id: Id,
        public_name: String,
        description: String,
    },
    Node {
        testbed_id: Id,
        public_identifier: String,
        device_descriptors: Vec<DeviceDescriptor>,
        control_mode: ControlMode,
    },
}

/// Any record addressable by ID through [`ContextStore::get_context`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", content = "record", rename_all = "snake_case")]
pub enum Entity {
    Lab(LabRecord),
    Testbed(TestbedRecord),
    Node(NodeRecord),
    Reservation(crate::scheduler::Reservation),
    Session(crate::sessions::Session),
    Artifact(crate::repos::ArtifactEntry),
}

impl Entity {
    pub fn id(&self) -> &Id {
        match self {
            Entity::Lab(r) => &r.lab_id,
            Entity::Testbed(r) => &r.testbed_id,
            Entity::Node(r) => &r.node_id,
            Entity::Reservation(r) => &r.reservation_id,
            Entity::Session(r) => &r.session_id,
            Entity::Artifact(r) => &r.artifact_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextView {
    pub entity: Entity,
    pub edges: Vec<AssociationEdge>,
    pub neighbors: Vec<Entity>,
}

/// Predicates for [`ContextStore::query`]; every set field must match.
#[derive(Debug, Clone, Default)]
pub struct NodeFilter {
    pub state: Option<FederationState>,
    pub testbed_id: Option<Id>,
    /// Matches the testbed's public name.
    pub testbed_name: Option<String>,
    pub lab_id: Option<Id>,
    pub device_kind: Option<String>,
    pub device_model: Option<String>,
    pub include_deleted: bool,
}

/// Resolves a live (not tombstoned) entity by ID.
pub fn lookup(state: &State, id: &Id) -> Option<Entity> {
    if let Some(r) = state.labs.get(id).filter(|r| r.deleted_at.is_none()) {
        return Some(Entity::Lab(r.clone()));
    }
    if let Some(r) = state.testbeds.get(id).filter(|r| r.deleted_at.is_none()) {
        return Some(Entity::Testbed(r.clone()));
    }
    if let Some(r) = state.nodes.get(id).filter(|r| r.deleted_at.is_none()) {
        return Some(Entity::Node(r.clone()));
    }
    if let Some(r) = state.reservations.get(id) {
        return Some(Entity::Reservation(r.clone()));
    }
    if let Some(r) = state.sessions.get(id) {
        return Some(Entity::Session(r.clone()));
    }
    if let Some(r) = state.artifacts.get(id).filter(|r| r.deleted_at.is_none()) {
        return Some(Entity::Artifact(r.clone()));
    }
    None
}

pub fn entity_exists(state: &State, id: &Id) -> bool {
    lookup(state, id).is_some() || state.users.contains_key(id)
}

/// Adds an edge after checking both endpoints resolve.
pub fn link(tx: &mut Tx<'_>, from: &Id, to: &Id, relation: Relation) -> Result<()> {
    for id in [from, to] {
        if !entity_exists(tx, id) {
            return Err(Error::new(ErrorCode::DanglingRef, format!("{id} does not exist")));
        }
    }
    tx.add_edge(AssociationEdge::new(from.clone(), to.clone(), relation));
    Ok(())
}

pub fn insert_entity(tx: &mut Tx<'_>, id: Id, now: DateTime<Utc>, entity: NewEntity) -> Result<Entity> {
    match entity {
        NewEntity::Lab {
            name,
            owner_user_id,
        } => {
            let name = name.trim().to_string();
            if name.is_empty() {
                return Err(Error::new(ErrorCode::Validation, "lab name must be non-empty")
                    .with_details(vec!["name".into()]));
            }
            if !tx.users.contains_key(&owner_user_id) {
                return Err(Error::new(ErrorCode::DanglingRef, "owner user does not exist"));
            }
            if tx.live_labs().any(|l| l.name.eq_ignore_ascii_case(&name)) {
                return Err(Error::new(ErrorCode::Duplicate, format!("lab {name:?} already exists")));
            }
            let base = slugify(&name, "lab");
            let slug = unique_slug(&base, |c| tx.labs.values().any(|l| l.slug == c));
            let rec = LabRecord {
                lab_id: id,
                name,
                slug,
                owner_user_id,
                created_at: now,
                deleted_at: None,
            };
            tx.put(rec.clone());
            Ok(Entity::Lab(rec))
        }
        NewEntity::Testbed {
            lab_id,
            public_name,
            description,
        } => {
            let public_name = public_name.trim().to_string();
            if public_name.is_empty() {
                return Err(Error::new(ErrorCode::Validation, "public testbed identifier must be non-empty")
                    .with_details(vec!["public_name".into()]));
            }
            if !tx.labs.get(&lab_id).is_some_and(|l| l.deleted_at.is_none()) {
                return Err(Error::new(ErrorCode::DanglingRef, format!("lab {lab_id} does not exist")));
            }
            let siblings: Vec<&TestbedRecord> = tx.live_testbeds().filter(|t| t.lab_id == lab_id).collect();
            if siblings.iter().any(|t| t.public_name == public_name) {
                return Err(Error::new(
                    ErrorCode::Duplicate,
                    format!("testbed {public_name:?} already exists in this lab"),
                ));
            }
            let base = slugify(&public_name, "testbed");
            let slug = unique_slug(&base, |c| {
                tx.testbeds.values().any(|t| t.lab_id == lab_id && t.slug == c)
            });
            let rec = TestbedRecord {
                testbed_id: id.clone(),
                lab_id: lab_id.clone(),
                public_name,
                slug,
                description,
                created_at: now,
                deleted_at: None,
            };
            tx.put(rec.clone());
            link(tx, &id, &lab_id, Relation::TestbedInLab)?;
            Ok(Entity::Testbed(rec))
        }
        NewEntity::Node {
            testbed_id,
            public_identifier,
            device_descriptors,
            control_mode,
        } => {
            let public_identifier = public_identifier.trim().to_string();
            let mut missing = Vec::new();
            if public_identifier.is_empty() {
                missing.push("public_identifier".to_string());
            }
            for (i, d) in device_descriptors.iter().enumerate() {
                if d.kind.trim().is_empty() {
                    missing.push(format!("device_descriptors[{i}].kind"));
                }
            }
            if !missing.is_empty() {
                return Err(Error::new(ErrorCode::Validation, "invalid node").with_details(missing));
            }
            if !tx.testbeds.get(&testbed_id).is_some_and(|t| t.deleted_at.is_none()) {
                return Err(Error::new(ErrorCode::DanglingRef, format!("testbed {testbed_id} does not exist")));
            };
            if tx
                .live_nodes()
                .any(|n| n.testbed_id == testbed_id && n.public_identifier == public_identifier)
            {
                return Err(Error::new(
                    ErrorCode::Duplicate,
                    format!("node {public_identifier:?} already registered in this testbed"),
                ));
            }
            let rec = NodeRecord {
                node_id: id.clone(),
                testbed_id: testbed_id.clone(),
                public_identifier,
                device_descriptors,
                control_mode,
                federation_state: FederationState::Registered,
                namespace: None,
                state_history: vec![FederationState::Registered],
                created_at: now,
                deleted_at: None,
            };
            tx.put(rec.clone());
            link(tx, &id, &testbed_id, Relation::NodeInTestbed)?;
            Ok(Entity::Node(rec))
        }
    }
}

/// Transitions a node, assigning its namespace on first federation.
pub fn transition_node(tx: &mut Tx<'_>, node_id: &Id, to: FederationState) -> Result<NodeRecord> {
    let Some(mut node) = tx.nodes.get(node_id).filter(|n| n.deleted_at.is_none()).cloned() else {
        return Err(Error::not_found(format!("node {node_id}")));
    };
    let from = node.federation_state;
    if !from.can_transition(to) {
        return Err(Error::new(
            ErrorCode::IllegalTransition,
            format!("node cannot move from {} to {}", from.as_str(), to.as_str()),
        ));
    }
    if to == FederationState::Federated && node.namespace.is_none() {
        node.namespace = Some(derive_namespace(tx, &node)?);
    }
    node.federation_state = to;
    node.state_history.push(to);
    tx.put(node.clone());
    Ok(node)
}

fn derive_namespace(state: &State, node: &NodeRecord) -> Result<String> {
    let testbed = state
        .testbeds
        .get(&node.testbed_id)
        .ok_or_else(|| Error::new(ErrorCode::DanglingRef, "node testbed missing"))?;
    let lab = state
        .labs
        .get(&testbed.lab_id)
        .ok_or_else(|| Error::new(ErrorCode::DanglingRef, "testbed lab missing"))?;
    let prefix = format!("{}/{}/", lab.slug, testbed.slug);
    let taken: BTreeSet<&str> = state.nodes.values().filter_map(|n| n.namespace.as_deref()).collect();
    let base = slugify(&node.public_identifier, "node");
    let leaf = unique_slug(&base, |c| taken.contains(format!("{prefix}{c}").as_str()));
    Ok(format!("{prefix}{leaf}"))
}

/// Namespace of a testbed (`lab/testbed`).
pub fn testbed_namespace(state: &State, testbed: &TestbedRecord) -> Option<String> {
    state
        .labs
        .get(&testbed.lab_id)
        .map(|lab| format!("{}/{}", lab.slug, testbed.slug))
}

/// Lab owning the given lab/testbed/node, if any.
pub fn owning_lab<'a>(state: &'a State, id: &Id) -> Option<&'a LabRecord> {
    if let Some(lab) = state.labs.get(id) {
        return Some(lab);
    }
    let testbed_id = match state.nodes.get(id) {
        Some(node) => &node.testbed_id,
        None => id,
    };
    state
        .testbeds
        .get(testbed_id)
        .and_then(|t| state.labs.get(&t.lab_id))
}

pub fn query_nodes(state: &State, filter: &NodeFilter) -> Vec<NodeRecord> {
    state
        .nodes
        .values()
        .filter(|n| filter.include_deleted || n.deleted_at.is_none())
        .filter(|n| filter.state.is_none_or(|s| n.federation_state == s))
        .filter(|n| filter.testbed_id.as_ref().is_none_or(|t| &n.testbed_id == t))
        .filter(|n| {
            let testbed = state.testbeds.get(&n.testbed_id);
            let name_ok = filter
                .testbed_name
                .as_ref()
                .is_none_or(|want| testbed.is_some_and(|t| &t.public_name == want));
            let lab_ok = filter
                .lab_id
                .as_ref()
                .is_none_or(|want| testbed.is_some_and(|t| &t.lab_id == want));
            name_ok && lab_ok
        })
        .filter(|n| {
            if filter.device_kind.is_none() && filter.device_model.is_none() {
                return true;
            }
            n.device_descriptors.iter().any(|d| {
                filter
                    .device_kind
                    .as_ref()
                    .is_none_or(|k| d.kind.eq_ignore_ascii_case(k))
                    && filter
                        .device_model
                        .as_ref()
                        .is_none_or(|m| d.model.eq_ignore_ascii_case(m))
            })
        })
        .cloned()
        .collect()
}

/// Context store operations over the shared plane.
pub struct ContextStore<'a> {
    pub(crate) plane: &'a ControlPlane,
}

impl ContextStore<'_> {
    /// Inserts a lab, testbed or node with a server-assigned ID and creates
    /// the implied association edges in the same transaction.
    pub fn put_entity(&self, entity: NewEntity) -> Result<Entity> {
        let id = self.plane.ids.next_id();
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| insert_entity(tx, id, now, entity))
    }

    pub fn get_context(&self, id: &Id) -> Result<ContextView> {
        self.plane.store.read(|state| {
            let entity = lookup(state, id).ok_or_else(|| Error::not_found(id))?;
            let mut edges = state.edges_of(id);
            let mut neighbors = Vec::new();
            for edge in &edges {
                let other = if &edge.from_id == id { &edge.to_id } else { &edge.from_id };
                if let Some(n) = lookup(state, other) {
                    if !neighbors.iter().any(|e: &Entity| e.id() == n.id()) {
                        neighbors.push(n);
                    }
                }
            }
            // A node's lab is one hop away through its testbed.
            if let Entity::Node(node) = &entity {
                if let Some(lab) = owning_lab(state, &node.node_id) {
                    if lab.deleted_at.is_none() && !neighbors.iter().any(|e| e.id() == &lab.lab_id) {
                        neighbors.push(Entity::Lab(lab.clone()));
                    }
                }
            }
            edges.sort();
            neighbors.sort_by(|a, b| a.id().cmp(b.id()));
            Ok(ContextView {
                entity,
                edges,
                neighbors,
            })
        })
    }

    pub fn set_node_state(&self, node_id: &Id, to: FederationState) -> Result<NodeRecord> {
        self.plane.store.write(|tx| transition_node(tx, node_id, to))
    }

    /// Nodes matching `filter`, ordered by ID.
    pub fn query(&self, filter: &NodeFilter) -> Vec<NodeRecord> {
        self.plane.store.read(|state| query_nodes(state, filter))
    }

    pub fn labs(&self) -> Vec<LabRecord> {
        self.plane.store.read(|s| s.live_labs().cloned().collect())
    }

    pub fn testbeds(&self, lab_id: Option<&Id>) -> Vec<TestbedRecord> {
        self.plane.store.read(|s| {
            s.live_testbeds()
                .filter(|t| lab_id.is_none_or(|l| &t.lab_id == l))
                .cloned()
                .collect()
        })
    }

    /// Soft-deletes a lab, testbed or node. Its edges are removed; artifacts
    /// filed against a deleted node are tombstoned with it.
    pub fn delete_entity(&self, id: &Id) -> Result<()> {
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| tombstone(tx, id, now))
    }
}

fn tombstone(tx: &mut Tx<'_>, id: &Id, now: DateTime<Utc>) -> Result<()> {
    let record = if let Some(mut r) = tx.labs.get(id).filter(|r| r.deleted_at.is_none()).cloned() {
        let children: Vec<Id> = tx.live_testbeds().filter(|t| &t.lab_id == id).map(|t| t.testbed_id.clone()).collect();
        for child in children {
            tombstone(tx, &child, now)?;
        }
        r.deleted_at = Some(now);
        Record::Lab(r)
    } else if let Some(mut r) = tx.testbeds.get(id).filter(|r| r.deleted_at.is_none()).cloned() {
        let children: Vec<Id> = tx.live_nodes().filter(|n| &n.testbed_id == id).map(|n| n.node_id.clone()).collect();
        for child in children {
            tombstone(tx, &child, now)?;
        }
        r.deleted_at = Some(now);
        Record::Testbed(r)
    } else if let Some(mut r) = tx.nodes.get(id).filter(|r| r.deleted_at.is_none()).cloned() {
        let artifacts: Vec<_> = tx
            .artifacts
            .values()
            .filter(|a| a.deleted_at.is_none() && a.references(id))
            .cloned()
            .collect();
        for mut a in artifacts {
            a.deleted_at = Some(now);
            for edge in tx.edges_of(&a.artifact_id) {
                tx.remove_edge(&edge);
            }
            tx.put(a);
        }
        r.deleted_at = Some(now);
        Record::Node(r)
    } else {
        return Err(Error::not_found(id));
    };
    for edge in tx.edges_of(id) {
        tx.remove_edge(&edge);
    }
    tx.put(record);
    Ok(())
}

#[cfg(test)]
mod tests;
