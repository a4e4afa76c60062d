use proptest::prelude::*;

use super::*;
use crate::harness::fixture::{test_config, Fixture};

const NODE_NS: &str = "fixture-lab/fixture-testbed/node-1";
const TESTBED_NS: &str = "fixture-lab/fixture-testbed";

fn req(ns: &str, name: &str, bytes: &[u8]) -> UploadRequest {
    UploadRequest {
        kind: ArtifactKind::Dataset,
        namespace: ns.into(),
        filename: name.into(),
        bytes: bytes.to_vec(),
        descriptors: Descriptors::default(),
        expected_checksum: None,
    }
}

#[test]
fn kind_parsing() {
    assert_eq!(ArtifactKind::parse("code"), Some(ArtifactKind::Code));
    assert_eq!(ArtifactKind::parse("DataSet"), Some(ArtifactKind::Dataset));
    assert_eq!(ArtifactKind::parse("model"), None);
}

#[test]
fn namespaces_resolve_to_context() {
    let fx = Fixture::new(1);
    let (tb, node) = fx.plane.store().read(|s| resolve_namespace(s, NODE_NS)).unwrap();
    assert_eq!((tb, node), (fx.testbed_id.clone(), Some(fx.nodes[0].clone())));
    let (tb, node) = fx.plane.store().read(|s| resolve_namespace(s, &format!("/{TESTBED_NS}/"))).unwrap();
    assert_eq!((tb, node), (fx.testbed_id.clone(), None));
    assert!(fx.plane.store().read(|s| resolve_namespace(s, "fixture-lab")).is_none());
    assert!(fx.plane.store().read(|s| resolve_namespace(s, "nope/nope")).is_none());
}

#[test]
fn upload_and_fetch_round_trip() {
    let fx = Fixture::new(1);
    let repos = fx.plane.repos();
    let e = repos.upload(&fx.user.user_id, req(NODE_NS, "iq.bin", b"samples")).unwrap();
    assert_eq!(e.checksum, sha256_hex(b"samples"));
    assert_eq!(e.size_bytes, 7);
    assert_eq!(e.context_node_id.as_ref(), Some(&fx.nodes[0]));
    assert!(e.references(&fx.nodes[0]));
    let (entry, bytes) = repos.fetch(&e.artifact_id).unwrap();
    assert_eq!(entry, e);
    assert_eq!(bytes, b"samples");
    let linked = fx.plane.store().read(|s| s.edges_of(&e.artifact_id));
    assert_eq!(linked.len(), 1);
    assert_eq!(linked[0].relation, crate::context::Relation::ArtifactForNode);
}

#[test]
fn identical_content_is_stored_once() {
    let fx = Fixture::new(1);
    let repos = fx.plane.repos();
    let a = repos.upload(&fx.user.user_id, req(NODE_NS, "a.bin", b"same")).unwrap();
    let b = repos.upload(&fx.owner.user_id, req(TESTBED_NS, "b.bin", b"same")).unwrap();
    assert_ne!(a.artifact_id, b.artifact_id);
    assert_eq!(a.checksum, b.checksum);
    assert_eq!(repos.stored_bytes().unwrap(), 4);
    assert_eq!(repos.list(&ArtifactFilter::default()).len(), 2);
}

#[test]
fn rejected_uploads() {
    let cfg = crate::config::PlaneConfig {
        max_artifact_bytes: 8,
        ..test_config()
    };
    let fx = Fixture::with_config(cfg, 1).unwrap();
    let repos = fx.plane.repos();
    let code = |r: UploadRequest| repos.upload(&fx.user.user_id, r).unwrap_err().code;

    let err = repos.upload(&fx.user.user_id, req(" ", "a/b", b"x")).unwrap_err();
    assert_eq!(err.code, ErrorCode::Validation);
    assert_eq!(err.details, ["filename", "namespace"]);
    assert_eq!(code(req(NODE_NS, "big", b"123456789")), ErrorCode::TooLarge);
    assert_eq!(code(req("fixture-lab/other", "f", b"x")), ErrorCode::NoNamespace);

    let mut r = req(NODE_NS, "f", b"x");
    r.expected_checksum = Some(sha256_hex(b"y"));
    assert_eq!(code(r), ErrorCode::ChecksumMismatch);
    let mut r = req(NODE_NS, "f", b"x");
    r.expected_checksum = Some(sha256_hex(b"x").to_uppercase());
    assert!(repos.upload(&fx.user.user_id, r).is_ok());

    let mut r = req(TESTBED_NS, "f", b"x");
    r.descriptors.node_id = Some(fx.testbed_id.clone());
    assert_eq!(code(r), ErrorCode::DanglingRef);
    let mut r = req(TESTBED_NS, "f", b"x");
    r.descriptors.testbed_id = Some(fx.nodes[0].clone());
    assert_eq!(code(r), ErrorCode::DanglingRef);
    assert_eq!(repos.list(&ArtifactFilter::default()).len(), 1);
}

#[test]
fn filters() {
    let fx = Fixture::new(2);
    let repos = fx.plane.repos();
    let node2 = "fixture-lab/fixture-testbed/node-2";
    let a = repos.upload(&fx.user.user_id, req(NODE_NS, "a", b"a")).unwrap();
    let mut r = req(node2, "b", b"b");
    r.kind = ArtifactKind::Code;
    let b = repos.upload(&fx.user.user_id, r).unwrap();
    let mut r = req(TESTBED_NS, "c", b"c");
    r.descriptors.node_id = Some(fx.nodes[0].clone());
    let c = repos.upload(&fx.user.user_id, r).unwrap();
    let ids = |f: ArtifactFilter| -> Vec<Id> { repos.list(&f).into_iter().map(|e| e.artifact_id).collect() };

    assert_eq!(ids(ArtifactFilter::default()), [a.artifact_id.clone(), b.artifact_id.clone(), c.artifact_id.clone()]);
    assert_eq!(ids(ArtifactFilter { kind: Some(ArtifactKind::Code), ..Default::default() }), std::slice::from_ref(&b.artifact_id));
    assert_eq!(
        ids(ArtifactFilter { node_id: Some(fx.nodes[0].clone()), ..Default::default() }),
        [a.artifact_id.clone(), c.artifact_id.clone()]
    );
    assert_eq!(ids(ArtifactFilter { namespace: Some(TESTBED_NS.into()), ..Default::default() }).len(), 3);
    assert_eq!(ids(ArtifactFilter { namespace: Some(node2.into()), ..Default::default() }), std::slice::from_ref(&b.artifact_id));
    // A prefix match stops at path boundaries.
    assert!(ids(ArtifactFilter { namespace: Some("fixture-lab/fixture-test".into()), ..Default::default() }).is_empty());
    assert_eq!(ids(ArtifactFilter { testbed_id: Some(fx.testbed_id.clone()), ..Default::default() }).len(), 3);
}

#[test]
fn survives_reopen_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = crate::config::PlaneConfig {
        db_path: Some(dir.path().join("plane.db")),
        ..test_config()
    };
    let id = {
        let fx = Fixture::with_config(cfg.clone(), 1).unwrap();
        fx.plane.repos().upload(&fx.user.user_id, req(NODE_NS, "f", b"durable")).unwrap().artifact_id
    };
    let plane = crate::ControlPlane::builder(cfg.clone()).build().unwrap();
    let (entry, bytes) = plane.repos().fetch(&id).unwrap();
    assert_eq!(bytes, b"durable");

    let path = BlobStore::path_for(&cfg.blob_root().unwrap(), &entry.checksum);
    std::fs::write(&path, b"tampered").unwrap();
    assert_eq!(plane.repos().fetch(&id).unwrap_err().code, ErrorCode::ChecksumMismatch);
    std::fs::remove_file(&path).unwrap();
    assert_eq!(plane.repos().fetch(&id).unwrap_err().code, ErrorCode::ChecksumMismatch);
    assert_eq!(plane.repos().fetch(&entry.uploaded_by).unwrap_err().code, ErrorCode::NotFound);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Every upload fetches back byte-identical, and the store holds each
    /// distinct content exactly once.
    #[test]
    fn stored_bytes_counts_distinct_content(blobs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 1..20), dup in prop::collection::vec(any::<prop::sample::Index>(), 0..10)) {
        let fx = Fixture::new(1);
        let repos = fx.plane.repos();
        let mut all = blobs.clone();
        all.extend(dup.iter().map(|i| blobs[i.index(blobs.len())].clone()));
        let mut uploaded = Vec::new();
        for (i, b) in all.iter().enumerate() {
            uploaded.push(repos.upload(&fx.user.user_id, req(NODE_NS, &format!("f{i}"), b)).unwrap().artifact_id);
        }
        for (id, b) in uploaded.iter().zip(&all) {
            prop_assert_eq!(&repos.fetch(id).unwrap().1, b);
        }
        let distinct: std::collections::HashSet<&Vec<u8>> = all.iter().collect();
        let expect: u64 = distinct.iter().map(|b| b.len() as u64).sum();
        prop_assert_eq!(repos.stored_bytes().unwrap(), expect);
    }
}

#[test]
fn staging_follows_live_sessions() {
    let fx = Fixture::new(2);
    let repos = fx.plane.repos();
    fx.plane.sessions().bind_image(&fx.owner, &fx.testbed_id, "img:1", "").unwrap();
    assert!(repos.upload(&fx.user.user_id, req(NODE_NS, "a", b"a")).unwrap().staged_command_id.is_none());
    let s = fx.plane.sessions().connect(&fx.user, &fx.nodes[0]).unwrap();
    let staged = repos.upload(&fx.user.user_id, req(NODE_NS, "b", b"b")).unwrap();
    let cmd = fx.plane.federation().get_command(staged.staged_command_id.as_ref().unwrap()).unwrap();
    assert_eq!(cmd.node_id, fx.nodes[0]);
    assert!(matches!(
        cmd.action,
        crate::federation::CommandAction::StageArtifact { ref artifact_id, ref filename, .. }
            if artifact_id == &staged.artifact_id && filename == "b"
    ));
    // Testbed-level uploads and other nodes are not staged.
    assert!(repos.upload(&fx.user.user_id, req(TESTBED_NS, "c", b"c")).unwrap().staged_command_id.is_none());
    let other = "fixture-lab/fixture-testbed/node-2";
    assert!(repos.upload(&fx.user.user_id, req(other, "d", b"d")).unwrap().staged_command_id.is_none());
    fx.plane.sessions().disconnect(&s.session_id, &fx.user).unwrap();
    assert!(repos.upload(&fx.user.user_id, req(NODE_NS, "e", b"e")).unwrap().staged_command_id.is_none());
}

#[test]
fn dot_filenames_are_refused() {
    let fx = Fixture::new(1);
    for name in [".", "..", "a\\b", "a\0b"] {
        let err = fx.plane.repos().upload(&fx.user.user_id, req(NODE_NS, name, b"x")).unwrap_err();
        assert_eq!(err.details, ["filename"], "{name:?}");
    }
}
