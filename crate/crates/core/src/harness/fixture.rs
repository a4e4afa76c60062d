//! Ready-made control planes for tests and embedding: a manual clock,
//! three accounts, one lab and testbed, and a set of enrolled nodes.

use std::sync::Arc;

use crate::api::{EnrollRequest, HeartbeatRequest, HeartbeatResponse};
use crate::clock::ManualClock;
use crate::config::{HashParams, PlaneConfig};
use crate::context::{ControlMode, DeviceDescriptor, Entity, NewEntity, Role, UserRecord};
use crate::error::Result;
use crate::ids::Id;
use crate::ControlPlane;

pub struct Fixture {
    pub plane: Arc<ControlPlane>,
    pub clock: ManualClock,
    pub admin: UserRecord,
    pub owner: UserRecord,
    pub user: UserRecord,
    pub lab_id: Id,
    pub testbed_id: Id,
    /// Enrolled nodes, in creation order.
    pub nodes: Vec<Id>,
    /// Agent bearer tokens, parallel to `nodes`.
    pub tokens: Vec<String>,
}

/// The configuration fixtures use unless told otherwise.
pub fn test_config() -> PlaneConfig {
    PlaneConfig {
        password_hash: HashParams::fast(),
        sync_writes: false,
        ..PlaneConfig::default()
    }
}

impl Fixture {
    /// An in-memory plane with `nodes` federated nodes.
    pub fn new(nodes: usize) -> Self {
        Self::with_config(test_config(), nodes).expect("fixture")
    }

    pub fn with_config(cfg: PlaneConfig, nodes: usize) -> Result<Self> {
        let clock = ManualClock::at_epoch();
        let plane = Arc::new(ControlPlane::builder(cfg).clock(Arc::new(clock.clone())).id_seed(42).build()?);
        let auth = plane.auth();
        let admin = auth.create_user("admin", "admin-credential", Role::Admin)?;
        let owner = auth.create_user("owner", "owner-credential", Role::Owner)?;
        let user = auth.create_user("experimenter", "experimenter-credential", Role::Experimenter)?;
        let ctx = plane.context();
        let Entity::Lab(lab) = ctx.put_entity(NewEntity::Lab {
            name: "Fixture Lab".into(),
            owner_user_id: owner.user_id.clone(),
        })?
        else {
            unreachable!("lab insert returns a lab")
        };
        let Entity::Testbed(testbed) = ctx.put_entity(NewEntity::Testbed {
            lab_id: lab.lab_id.clone(),
            public_name: "Fixture Testbed".into(),
            description: String::new(),
        })?
        else {
            unreachable!("testbed insert returns a testbed")
        };
        let mut fixture = Fixture {
            plane,
            clock,
            admin,
            owner,
            user,
            lab_id: lab.lab_id,
            testbed_id: testbed.testbed_id,
            nodes: Vec::new(),
            tokens: Vec::new(),
        };
        for _ in 0..nodes {
            fixture.add_node()?;
        }
        Ok(fixture)
    }

    /// Registers a node without enrolling it.
    pub fn register_node(&self) -> Result<Id> {
        let n = self.plane.store().read(|s| s.nodes.len());
        let Entity::Node(node) = self.plane.context().put_entity(NewEntity::Node {
            testbed_id: self.testbed_id.clone(),
            public_identifier: format!("node {}", n + 1),
            device_descriptors: vec![DeviceDescriptor {
                kind: "SDR".into(),
                model: "B210".into(),
                notes: String::new(),
            }],
            control_mode: ControlMode::Distributed,
        })?
        else {
            unreachable!("node insert returns a node")
        };
        Ok(node.node_id)
    }

    /// Registers and enrolls one more node; returns its index.
    pub fn add_node(&mut self) -> Result<usize> {
        let node_id = self.register_node()?;
        let activation = self.plane.federation().issue_activation(&node_id)?;
        let grant = self.plane.federation().enroll(&EnrollRequest {
            activation_id: activation.activation_id.to_string(),
            activation_code: activation.activation_code,
            agent_version: crate::VERSION.into(),
            host_facts: Default::default(),
        })?;
        self.nodes.push(grant.node_id);
        self.tokens.push(grant.agent_token);
        Ok(self.nodes.len() - 1)
    }

    pub fn heartbeat(&self, index: usize) -> Result<HeartbeatResponse> {
        self.plane.federation().heartbeat(&self.tokens[index], &HeartbeatRequest::default())
    }
}
