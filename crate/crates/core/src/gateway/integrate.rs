//! Testbed integration: register lab, testbed and nodes, associate them,
//! and issue one activation plus deployment script per control interface,
//! all in a single transaction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::{insert_entity, ControlMode, DeviceDescriptor, Entity, NewEntity, Role, UserRecord};
use crate::error::{Error, ErrorCode, Result};
use crate::federation::{generate_script_tx, issue_activation_tx, DeploymentScript};
use crate::ids::Id;
use crate::ControlPlane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationRequest {
    #[serde(default)]
    pub lab_name: String,
    #[serde(default)]
    pub public_name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_mode")]
    pub control_mode: ControlMode,
    #[serde(default)]
    pub nodes: Vec<ControlInterface>,
}

fn default_mode() -> ControlMode {
    ControlMode::Distributed
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInterface {
    #[serde(default)]
    pub public_identifier: String,
    #[serde(default)]
    pub devices: Vec<DeviceDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeScript {
    pub node_id: Id,
    pub public_identifier: String,
    pub activation_id: Id,
    pub checksum: String,
    pub script: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrationResult {
    pub lab_id: Id,
    pub testbed_id: Id,
    /// Keyed by node ID.
    pub scripts: BTreeMap<Id, NodeScript>,
}

impl IntegrationRequest {
    /// Every missing or empty required field, as a path.
    pub fn missing_fields(&self) -> Vec<String> {
        let mut missing = Vec::new();
        if self.lab_name.trim().is_empty() {
            missing.push("lab_name".to_string());
        }
        if self.public_name.trim().is_empty() {
            missing.push("public_name".to_string());
        }
        if self.description.trim().is_empty() {
            missing.push("description".to_string());
        }
        if self.nodes.is_empty() {
            missing.push("nodes".to_string());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.public_identifier.trim().is_empty() {
                missing.push(format!("nodes[{i}].public_identifier"));
            }
            if node.devices.is_empty() {
                missing.push(format!("nodes[{i}].devices"));
            }
            for (j, d) in node.devices.iter().enumerate() {
                if d.kind.trim().is_empty() {
                    missing.push(format!("nodes[{i}].devices[{j}].kind"));
                }
            }
        }
        missing
    }
}

pub(crate) fn to_node_script(s: DeploymentScript, public_identifier: String) -> NodeScript {
    NodeScript {
        node_id: s.node_id,
        public_identifier,
        activation_id: s.activation_id,
        checksum: s.checksum,
        script: s.script_text,
    }
}

impl ControlPlane {
    pub fn integrate_testbed(&self, owner: &UserRecord, req: &IntegrationRequest) -> Result<IntegrationResult> {
        if !matches!(owner.role, Role::Owner | Role::Admin) {
            return Err(Error::new(ErrorCode::Forbidden, "only testbed owners may integrate testbeds"));
        }
        let missing = req.missing_fields();
        if !missing.is_empty() {
            return Err(Error::new(ErrorCode::Validation, "integration request is incomplete").with_details(missing));
        }
        let now = self.clock.now();
        let cfg = &self.config;
        self.store.write(|tx| {
            let existing = tx
                .live_labs()
                .find(|l| l.name.eq_ignore_ascii_case(req.lab_name.trim()))
                .cloned();
            let lab_id = match existing {
                Some(lab) if lab.owner_user_id != owner.user_id && owner.role != Role::Admin => {
                    return Err(Error::new(ErrorCode::Forbidden, "lab belongs to another owner"));
                }
                Some(lab) => lab.lab_id,
                None => {
                    let lab = insert_entity(
                        tx,
                        self.ids.next_id(),
                        now,
                        NewEntity::Lab {
                            name: req.lab_name.clone(),
                            owner_user_id: owner.user_id.clone(),
                        },
                    )?;
                    lab.id().clone()
                }
            };
            let testbed = insert_entity(
                tx,
                self.ids.next_id(),
                now,
                NewEntity::Testbed {
                    lab_id: lab_id.clone(),
                    public_name: req.public_name.clone(),
                    description: req.description.clone(),
                },
            )?;
            let testbed_id = testbed.id().clone();
            let mut scripts = BTreeMap::new();
            for iface in &req.nodes {
                let node = insert_entity(
                    tx,
                    self.ids.next_id(),
                    now,
                    NewEntity::Node {
                        testbed_id: testbed_id.clone(),
                        public_identifier: iface.public_identifier.clone(),
                        device_descriptors: iface.devices.clone(),
                        control_mode: req.control_mode,
                    },
                )?;
                let Entity::Node(node) = node else { unreachable!("node insert returns a node") };
                issue_activation_tx(tx, &self.ids, cfg, &node.node_id, now)?;
                let script = generate_script_tx(tx, cfg, &node.node_id, now)?;
                scripts.insert(node.node_id.clone(), to_node_script(script, node.public_identifier));
            }
            Ok(IntegrationResult {
                lab_id,
                testbed_id,
                scripts,
            })
        })
    }

    /// Issues a fresh activation for one node and returns its script.
    pub fn integrate_node(&self, requester: &UserRecord, node_id: &Id) -> Result<NodeScript> {
        let now = self.clock.now();
        self.store.write(|tx| {
            let node = tx
                .nodes
                .get(node_id)
                .filter(|n| n.deleted_at.is_none())
                .cloned()
                .ok_or_else(|| Error::not_found(format!("node {node_id}")))?;
            let owner = crate::context::owning_lab(tx, node_id).map(|l| l.owner_user_id.clone());
            if requester.role != Role::Admin && owner.as_ref() != Some(&requester.user_id) {
                return Err(Error::new(ErrorCode::Forbidden, "only the lab owner may integrate this node"));
            }
            issue_activation_tx(tx, &self.ids, &self.config, node_id, now)?;
            let script = generate_script_tx(tx, &self.config, node_id, now)?;
            Ok(to_node_script(script, node.public_identifier))
        })
    }
}
