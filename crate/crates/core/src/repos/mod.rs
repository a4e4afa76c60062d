//! Code and dataset repositories: namespaced, content-addressed artifacts
//! linked to the node/testbed contexts they describe.

pub mod blob;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::context::{link, testbed_namespace, Relation};
use crate::error::{Error, ErrorCode, Result};
use crate::federation::{queue_command, CommandAction};
use crate::ids::Id;
use crate::store::State;
use crate::ControlPlane;

pub use blob::{sha256_hex, BlobStore};

const STAGE_TIMEOUT_S: u64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArtifactKind {
    Code,
    Dataset,
}

impl ArtifactKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CODE" => Some(ArtifactKind::Code),
            "DATASET" => Some(ArtifactKind::Dataset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Descriptors {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<Id>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub testbed_id: Option<Id>,
    #[serde(default)]
    pub experiment_context: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub artifact_id: Id,
    pub kind: ArtifactKind,
    pub namespace: String,
    pub filename: String,
    pub size_bytes: u64,
    /// Hex SHA-256 of the content.
    pub checksum: String,
    pub descriptors: Descriptors,
    /// Testbed and (for node namespaces) node the namespace resolved to.
    pub context_testbed_id: Id,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_node_id: Option<Id>,
    pub uploaded_by: Id,
    pub uploaded_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
    /// Command copying the file to the node's agent host, queued when the
    /// upload lands in a node namespace while a session there is live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub staged_command_id: Option<Id>,
}

impl ArtifactEntry {
    pub fn references(&self, id: &Id) -> bool {
        self.context_node_id.as_ref() == Some(id)
            || self.descriptors.node_id.as_ref() == Some(id)
            || &self.context_testbed_id == id
            || self.descriptors.testbed_id.as_ref() == Some(id)
    }
}

#[derive(Debug, Clone)]
pub struct UploadRequest {
    pub kind: ArtifactKind,
    pub namespace: String,
    pub filename: String,
    pub bytes: Vec<u8>,
    pub descriptors: Descriptors,
    /// Hex SHA-256 the client expects; verified when present.
    pub expected_checksum: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ArtifactFilter {
    /// Exact namespace or any namespace below it.
    pub namespace: Option<String>,
    pub kind: Option<ArtifactKind>,
    pub node_id: Option<Id>,
    pub testbed_id: Option<Id>,
}

/// Resolves `lab/testbed` or `lab/testbed/node` to (testbed, node).
pub fn resolve_namespace(state: &State, namespace: &str) -> Option<(Id, Option<Id>)> {
    let ns = namespace.trim_matches('/');
    if let Some(node) = state.live_nodes().find(|n| n.namespace.as_deref() == Some(ns)) {
        return Some((node.testbed_id.clone(), Some(node.node_id.clone())));
    }
    state
        .live_testbeds()
        .find(|t| testbed_namespace(state, t).as_deref() == Some(ns))
        .map(|t| (t.testbed_id.clone(), None))
}

fn matches(e: &ArtifactEntry, f: &ArtifactFilter) -> bool {
    f.kind.is_none_or(|k| e.kind == k)
        && f.namespace.as_ref().is_none_or(|ns| {
            let ns = ns.trim_matches('/');
            e.namespace == ns || e.namespace.starts_with(&format!("{ns}/"))
        })
        && f.node_id.as_ref().is_none_or(|n| {
            e.context_node_id.as_ref() == Some(n) || e.descriptors.node_id.as_ref() == Some(n)
        })
        && f.testbed_id.as_ref().is_none_or(|t| {
            &e.context_testbed_id == t || e.descriptors.testbed_id.as_ref() == Some(t)
        })
}

pub fn list_in(state: &State, filter: &ArtifactFilter) -> Vec<ArtifactEntry> {
    let mut out: Vec<ArtifactEntry> = state
        .artifacts
        .values()
        .filter(|e| e.deleted_at.is_none() && matches(e, filter))
        .cloned()
        .collect();
    out.sort_by(|a, b| (a.uploaded_at, &a.artifact_id).cmp(&(b.uploaded_at, &b.artifact_id)));
    out
}

pub struct Repos<'a> {
    pub(crate) plane: &'a ControlPlane,
}

impl Repos<'_> {
    pub fn upload(&self, uploader: &Id, req: UploadRequest) -> Result<ArtifactEntry> {
        let mut missing = Vec::new();
        let name = req.filename.trim();
        if name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\', '\0']) {
            missing.push("filename".to_string());
        }
        if req.namespace.trim().is_empty() {
            missing.push("namespace".to_string());
        }
        if !missing.is_empty() {
            return Err(Error::new(ErrorCode::Validation, "invalid upload").with_details(missing));
        }
        if req.bytes.len() as u64 > self.plane.config.max_artifact_bytes {
            return Err(Error::new(
                ErrorCode::TooLarge,
                format!("artifact exceeds {} bytes", self.plane.config.max_artifact_bytes),
            ));
        }
        let checksum = sha256_hex(&req.bytes);
        if let Some(expected) = &req.expected_checksum {
            if !expected.eq_ignore_ascii_case(&checksum) {
                return Err(Error::new(ErrorCode::ChecksumMismatch, "content does not match the supplied checksum"));
            }
        }
        let namespace = req.namespace.trim_matches('/').to_string();
        let resolved = self.plane.store.read(|s| resolve_namespace(s, &namespace));
        if resolved.is_none() {
            return Err(Error::new(ErrorCode::NoNamespace, format!("namespace {namespace:?} does not exist")));
        }
        let (stored, _) = self.plane.blobs.put(&req.bytes).map_err(Error::storage)?;
        debug_assert_eq!(stored, checksum);
        let artifact_id = self.plane.ids.next_id();
        let now = self.plane.clock.now();
        self.plane.store.write(|tx| {
            // Re-resolve inside the transaction.
            let (testbed_id, node_id) = resolve_namespace(tx, &namespace)
                .ok_or_else(|| Error::new(ErrorCode::NoNamespace, format!("namespace {namespace:?} does not exist")))?;
            if let Some(n) = &req.descriptors.node_id {
                if !tx.nodes.get(n).is_some_and(|r| r.deleted_at.is_none()) {
                    return Err(Error::new(ErrorCode::DanglingRef, format!("descriptor node {n} does not exist")));
                }
            }
            if let Some(t) = &req.descriptors.testbed_id {
                if !tx.testbeds.get(t).is_some_and(|r| r.deleted_at.is_none()) {
                    return Err(Error::new(ErrorCode::DanglingRef, format!("descriptor testbed {t} does not exist")));
                }
            }
            let mut entry = ArtifactEntry {
                artifact_id: artifact_id.clone(),
                kind: req.kind,
                namespace: namespace.clone(),
                filename: req.filename.trim().to_string(),
                size_bytes: req.bytes.len() as u64,
                checksum: checksum.clone(),
                descriptors: req.descriptors.clone(),
                context_testbed_id: testbed_id,
                context_node_id: node_id.clone(),
                uploaded_by: uploader.clone(),
                uploaded_at: now,
                deleted_at: None,
                staged_command_id: None,
            };
            if let Some(node) = &node_id {
                if tx.sessions.values().any(|s| &s.node_id == node && s.state.is_live()) {
                    let action = CommandAction::StageArtifact {
                        artifact_id: artifact_id.clone(),
                        filename: entry.filename.clone(),
                        checksum: checksum.clone(),
                    };
                    match queue_command(tx, &self.plane.ids, &self.plane.config, node, action, STAGE_TIMEOUT_S, now) {
                        Ok(cmd) => entry.staged_command_id = Some(cmd.command_id),
                        Err(err) => tracing::warn!(%err, node_id = %node, "artifact not staged"),
                    }
                }
            }
            tx.put(entry.clone());
            for node in [node_id.as_ref(), req.descriptors.node_id.as_ref()].into_iter().flatten() {
                link(tx, &artifact_id, node, Relation::ArtifactForNode)?;
            }
            Ok(entry)
        })
    }

    pub fn list(&self, filter: &ArtifactFilter) -> Vec<ArtifactEntry> {
        self.plane.store.read(|s| list_in(s, filter))
    }

    pub fn entry(&self, artifact_id: &Id) -> Result<ArtifactEntry> {
        self.plane
            .store
            .read(|s| s.artifacts.get(artifact_id).filter(|e| e.deleted_at.is_none()).cloned())
            .ok_or_else(|| Error::not_found(format!("artifact {artifact_id}")))
    }

    /// Returns the artifact's bytes after verifying them against the
    /// recorded checksum.
    pub fn fetch(&self, artifact_id: &Id) -> Result<(ArtifactEntry, Vec<u8>)> {
        let entry = self.entry(artifact_id)?;
        let bytes = self.plane.blobs.get(&entry.checksum).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::new(ErrorCode::ChecksumMismatch, "stored blob is missing")
            } else {
                Error::storage(e)
            }
        })?;
        if sha256_hex(&bytes) != entry.checksum {
            tracing::error!(artifact_id = %artifact_id, "stored blob failed checksum verification");
            return Err(Error::new(ErrorCode::ChecksumMismatch, "stored blob is corrupt"));
        }
        Ok((entry, bytes))
    }

    pub fn stored_bytes(&self) -> Result<u64> {
        self.plane.blobs.stored_bytes().map_err(Error::storage)
    }
}

#[cfg(test)]
mod tests;
