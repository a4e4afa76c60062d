use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::auth::AuthSession;
use crate::context::{AssociationEdge, LabRecord, NodeRecord, TestbedRecord, UserRecord};
use crate::federation::{ActivationRecord, AgentRecord, RunCommand, ScriptRecord};
use crate::ids::Id;
use crate::repos::ArtifactEntry;
use crate::scheduler::{Reservation, ReservationStatus};
use crate::sessions::{ImageBinding, Session};

/// One row of any table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "snake_case")]
pub enum Record {
    Lab(LabRecord),
    Testbed(TestbedRecord),
    Node(NodeRecord),
    User(UserRecord),
    Activation(ActivationRecord),
    Script(ScriptRecord),
    Agent(AgentRecord),
    Command(RunCommand),
    Reservation(Reservation),
    Session(Session),
    Binding(ImageBinding),
    Artifact(ArtifactEntry),
    Auth(AuthSession),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Lab,
    Testbed,
    Node,
    User,
    Activation,
    Script,
    Agent,
    Command,
    Reservation,
    Session,
    Binding,
    Artifact,
    Auth,
}

macro_rules! record_from {
    ($($variant:ident => $ty:ty),* $(,)?) => {
        $(impl From<$ty> for Record {
            fn from(r: $ty) -> Record {
                Record::$variant(r)
            }
        })*
    };
}

record_from! {
    Lab => LabRecord,
    Testbed => TestbedRecord,
    Node => NodeRecord,
    User => UserRecord,
    Activation => ActivationRecord,
    Script => ScriptRecord,
    Agent => AgentRecord,
    Command => RunCommand,
    Reservation => Reservation,
    Session => Session,
    Binding => ImageBinding,
    Artifact => ArtifactEntry,
    Auth => AuthSession,
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Record::Lab(_) => RecordKind::Lab,
            Record::Testbed(_) => RecordKind::Testbed,
            Record::Node(_) => RecordKind::Node,
            Record::User(_) => RecordKind::User,
            Record::Activation(_) => RecordKind::Activation,
            Record::Script(_) => RecordKind::Script,
            Record::Agent(_) => RecordKind::Agent,
            Record::Command(_) => RecordKind::Command,
            Record::Reservation(_) => RecordKind::Reservation,
            Record::Session(_) => RecordKind::Session,
            Record::Binding(_) => RecordKind::Binding,
            Record::Artifact(_) => RecordKind::Artifact,
            Record::Auth(_) => RecordKind::Auth,
        }
    }

    pub fn key(&self) -> &str {
        match self {
            Record::Lab(r) => r.lab_id.as_str(),
            Record::Testbed(r) => r.testbed_id.as_str(),
            Record::Node(r) => r.node_id.as_str(),
            Record::User(r) => r.user_id.as_str(),
            Record::Activation(r) => r.activation_id.as_str(),
            Record::Script(r) => r.node_id.as_str(),
            Record::Agent(r) => r.node_id.as_str(),
            Record::Command(r) => r.command_id.as_str(),
            Record::Reservation(r) => r.reservation_id.as_str(),
            Record::Session(r) => r.session_id.as_str(),
            Record::Binding(r) => r.target_id.as_str(),
            Record::Artifact(r) => r.artifact_id.as_str(),
            Record::Auth(r) => &r.token_digest,
        }
    }
}

/// A journaled mutation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Change {
    Put(Record),
    Remove { kind: RecordKind, key: String },
    EdgeAdd(AssociationEdge),
    EdgeRemove(AssociationEdge),
}

/// Complete in-memory contents of the store plus derived indexes.
#[derive(Debug, Default)]
pub struct State {
    pub revision: u64,
    pub labs: BTreeMap<Id, LabRecord>,
    pub testbeds: BTreeMap<Id, TestbedRecord>,
    pub nodes: BTreeMap<Id, NodeRecord>,
    pub users: BTreeMap<Id, UserRecord>,
    pub activations: BTreeMap<Id, ActivationRecord>,
    pub scripts: BTreeMap<Id, ScriptRecord>,
    pub agents: BTreeMap<Id, AgentRecord>,
    pub commands: BTreeMap<Id, RunCommand>,
    pub reservations: BTreeMap<Id, Reservation>,
    pub sessions: BTreeMap<Id, Session>,
    pub bindings: BTreeMap<Id, ImageBinding>,
    pub artifacts: BTreeMap<Id, ArtifactEntry>,
    pub auth_sessions: BTreeMap<String, AuthSession>,
    pub edges: BTreeSet<AssociationEdge>,
    // Derived indexes, rebuilt on replay.
    edges_by_entity: HashMap<Id, BTreeSet<AssociationEdge>>,
    active_reservations_by_node: HashMap<Id, BTreeSet<Id>>,
    open_commands_by_node: HashMap<Id, BTreeSet<Id>>,
    users_by_name: HashMap<String, Id>,
    agents_by_token: HashMap<String, Id>,
}

impl State {
    pub(crate) fn apply(&mut self, change: Change) {
        match change {
            Change::Put(r) => {
                self.apply_put(r);
            }
            Change::Remove { kind, key } => {
                self.apply_remove(kind, &key);
            }
            Change::EdgeAdd(e) => {
                self.apply_edge_add(e);
            }
            Change::EdgeRemove(e) => {
                self.apply_edge_remove(&e);
            }
        }
    }

    pub(crate) fn apply_put(&mut self, record: Record) -> Option<Record> {
        match record {
            Record::Lab(r) => self.labs.insert(r.lab_id.clone(), r).map(Record::Lab),
            Record::Testbed(r) => self.testbeds.insert(r.testbed_id.clone(), r).map(Record::Testbed),
            Record::Node(r) => self.nodes.insert(r.node_id.clone(), r).map(Record::Node),
            Record::User(r) => {
                self.users_by_name.insert(r.username.clone(), r.user_id.clone());
                let prev = self.users.insert(r.user_id.clone(), r);
                prev.map(Record::User)
            }
            Record::Activation(r) => self.activations.insert(r.activation_id.clone(), r).map(Record::Activation),
            Record::Script(r) => self.scripts.insert(r.node_id.clone(), r).map(Record::Script),
            Record::Agent(r) => {
                let prev = self.agents.insert(r.node_id.clone(), r.clone());
                if let Some(p) = &prev {
                    self.agents_by_token.remove(&p.token_digest);
                }
                self.agents_by_token.insert(r.token_digest.clone(), r.node_id.clone());
                prev.map(Record::Agent)
            }
            Record::Command(r) => {
                let set = self.open_commands_by_node.entry(r.node_id.clone()).or_default();
                if r.status.is_terminal() {
                    set.remove(&r.command_id);
                } else {
                    set.insert(r.command_id.clone());
                }
                self.commands.insert(r.command_id.clone(), r).map(Record::Command)
            }
            Record::Reservation(r) => {
                for node in &r.node_ids {
                    let set = self.active_reservations_by_node.entry(node.clone()).or_default();
                    if r.status == ReservationStatus::Active {
                        set.insert(r.reservation_id.clone());
                    } else {
                        set.remove(&r.reservation_id);
                    }
                }
                self.reservations.insert(r.reservation_id.clone(), r).map(Record::Reservation)
            }
            Record::Session(r) => self.sessions.insert(r.session_id.clone(), r).map(Record::Session),
            Record::Binding(r) => self.bindings.insert(r.target_id.clone(), r).map(Record::Binding),
            Record::Artifact(r) => self.artifacts.insert(r.artifact_id.clone(), r).map(Record::Artifact),
            Record::Auth(r) => self.auth_sessions.insert(r.token_digest.clone(), r).map(Record::Auth),
        }
    }

    pub(crate) fn apply_remove(&mut self, kind: RecordKind, key: &str) -> Option<Record> {
        let id = || Id::parse(key);
        match kind {
            RecordKind::Auth => self.auth_sessions.remove(key).map(Record::Auth),
            RecordKind::Lab => self.labs.remove(&id()?).map(Record::Lab),
            RecordKind::Testbed => self.testbeds.remove(&id()?).map(Record::Testbed),
            RecordKind::Node => self.nodes.remove(&id()?).map(Record::Node),
            RecordKind::User => {
                let r = self.users.remove(&id()?)?;
                self.users_by_name.remove(&r.username);
                Some(Record::User(r))
            }
            RecordKind::Activation => self.activations.remove(&id()?).map(Record::Activation),
            RecordKind::Script => self.scripts.remove(&id()?).map(Record::Script),
            RecordKind::Agent => {
                let r = self.agents.remove(&id()?)?;
                self.agents_by_token.remove(&r.token_digest);
                Some(Record::Agent(r))
            }
            RecordKind::Command => {
                let r = self.commands.remove(&id()?)?;
                if let Some(set) = self.open_commands_by_node.get_mut(&r.node_id) {
                    set.remove(&r.command_id);
                }
                Some(Record::Command(r))
            }
            RecordKind::Reservation => {
                let r = self.reservations.remove(&id()?)?;
                for node in &r.node_ids {
                    if let Some(set) = self.active_reservations_by_node.get_mut(node) {
                        set.remove(&r.reservation_id);
                    }
                }
                Some(Record::Reservation(r))
            }
            RecordKind::Session => self.sessions.remove(&id()?).map(Record::Session),
            RecordKind::Binding => self.bindings.remove(&id()?).map(Record::Binding),
            RecordKind::Artifact => self.artifacts.remove(&id()?).map(Record::Artifact),
        }
    }

    pub(crate) fn apply_edge_add(&mut self, edge: AssociationEdge) -> bool {
        if !self.edges.insert(edge.clone()) {
            return false;
        }
        self.edges_by_entity.entry(edge.from_id.clone()).or_default().insert(edge.clone());
        self.edges_by_entity.entry(edge.to_id.clone()).or_default().insert(edge);
        true
    }

    pub(crate) fn apply_edge_remove(&mut self, edge: &AssociationEdge) -> bool {
        if !self.edges.remove(edge) {
            return false;
        }
        for id in [&edge.from_id, &edge.to_id] {
            if let Some(set) = self.edges_by_entity.get_mut(id) {
                set.remove(edge);
            }
        }
        true
    }

    /// Every edge touching `id`, in canonical order.
    pub fn edges_of(&self, id: &Id) -> Vec<AssociationEdge> {
        self.edges_by_entity
            .get(id)
            .map(|set| set.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn live_labs(&self) -> impl Iterator<Item = &LabRecord> {
        self.labs.values().filter(|r| r.deleted_at.is_none())
    }

    pub fn live_testbeds(&self) -> impl Iterator<Item = &TestbedRecord> {
        self.testbeds.values().filter(|r| r.deleted_at.is_none())
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values().filter(|r| r.deleted_at.is_none())
    }

    pub fn user_by_name(&self, username: &str) -> Option<&UserRecord> {
        self.users_by_name.get(username).and_then(|id| self.users.get(id))
    }

    pub fn agent_by_token_digest(&self, digest: &str) -> Option<&AgentRecord> {
        self.agents_by_token.get(digest).and_then(|id| self.agents.get(id))
    }

    pub fn active_reservations_on(&self, node_id: &Id) -> impl Iterator<Item = &Reservation> {
        self.active_reservations_by_node
            .get(node_id)
            .into_iter()
            .flatten()
            .filter_map(|id| self.reservations.get(id))
    }

    /// Non-terminal commands for a node in dispatch (FIFO) order.
    pub fn open_commands_for(&self, node_id: &Id) -> impl Iterator<Item = &RunCommand> {
        self.open_commands_by_node
            .get(node_id)
            .into_iter()
            .flatten()
            .filter_map(|id| self.commands.get(id))
    }

    pub(crate) fn snapshot_changes(&self) -> Vec<Change> {
        let mut out = Vec::new();
        out.extend(self.users.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.labs.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.testbeds.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.nodes.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.activations.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.scripts.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.agents.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.commands.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.reservations.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.sessions.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.bindings.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.artifacts.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.auth_sessions.values().cloned().map(|r| Change::Put(r.into())));
        out.extend(self.edges.iter().cloned().map(Change::EdgeAdd));
        out
    }
}
