use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::harness::fixture::Fixture;

use FederationState::*;

const ALL: [FederationState; 4] = [Registered, ActivationIssued, Federated, Offline];

fn node_input(testbed_id: &Id, name: &str, kind: &str, model: &str) -> NewEntity {
    NewEntity::Node {
        testbed_id: testbed_id.clone(),
        public_identifier: name.into(),
        device_descriptors: vec![DeviceDescriptor {
            kind: kind.into(),
            model: model.into(),
            notes: String::new(),
        }],
        control_mode: ControlMode::Centralized,
    }
}

fn put_node(fx: &Fixture, testbed_id: &Id, name: &str) -> NodeRecord {
    match fx.plane.context().put_entity(node_input(testbed_id, name, "SDR", "B210")).unwrap() {
        Entity::Node(n) => n,
        other => panic!("{other:?}"),
    }
}

fn put_testbed(fx: &Fixture, name: &str) -> TestbedRecord {
    match fx
        .plane
        .context()
        .put_entity(NewEntity::Testbed {
            lab_id: fx.lab_id.clone(),
            public_name: name.into(),
            description: String::new(),
        })
        .unwrap()
    {
        Entity::Testbed(t) => t,
        other => panic!("{other:?}"),
    }
}

#[test]
fn transition_table() {
    let allowed = [
        (Registered, ActivationIssued),
        (ActivationIssued, ActivationIssued),
        (ActivationIssued, Federated),
        (Federated, Offline),
        (Offline, Federated),
        (Offline, ActivationIssued),
    ];
    for from in ALL {
        for to in ALL {
            assert_eq!(from.can_transition(to), allowed.contains(&(from, to)), "{from:?} -> {to:?}");
        }
    }
}

#[test]
fn state_names_round_trip() {
    for s in ALL {
        assert_eq!(FederationState::parse(s.as_str()), Some(s));
        assert_eq!(FederationState::parse(&s.as_str().to_lowercase()), Some(s));
    }
    assert_eq!(FederationState::parse("GONE"), None);
}

#[test]
fn illegal_transition_is_rejected_and_state_kept() {
    let fx = Fixture::new(0);
    let node = put_node(&fx, &fx.testbed_id, "n1");
    let err = fx.plane.context().set_node_state(&node.node_id, Federated).unwrap_err();
    assert_eq!(err.code, ErrorCode::IllegalTransition);
    let rec = fx.plane.store().read(|s| s.nodes[&node.node_id].clone());
    assert_eq!(rec.federation_state, Registered);
    assert_eq!(rec.state_history, vec![Registered]);
}

#[test]
fn namespace_is_assigned_once_and_unique() {
    let fx = Fixture::new(0);
    let a = put_node(&fx, &fx.testbed_id, "Node 01");
    // Distinct identifiers that slugify identically.
    let b = put_node(&fx, &fx.testbed_id, "node-01");
    let ctx = fx.plane.context();
    let mut names = Vec::new();
    for n in [&a, &b] {
        ctx.set_node_state(&n.node_id, ActivationIssued).unwrap();
        let rec = ctx.set_node_state(&n.node_id, Federated).unwrap();
        names.push(rec.namespace.unwrap());
    }
    assert_eq!(names, vec!["fixture-lab/fixture-testbed/node-01", "fixture-lab/fixture-testbed/node-01-2"]);
    ctx.set_node_state(&a.node_id, Offline).unwrap();
    let again = ctx.set_node_state(&a.node_id, Federated).unwrap();
    assert_eq!(again.namespace.as_deref(), Some(names[0].as_str()));
}

#[test]
fn validation_and_reference_errors() {
    let fx = Fixture::new(0);
    let ctx = fx.plane.context();
    let err = ctx.put_entity(node_input(&fx.testbed_id, "  ", "", "")).unwrap_err();
    assert_eq!(err.code, ErrorCode::Validation);
    assert_eq!(err.details, vec!["public_identifier", "device_descriptors[0].kind"]);
    let missing = fx.plane.store().read(|s| s.users.keys().next().cloned()).unwrap();
    let err = ctx.put_entity(node_input(&missing, "n", "SDR", "")).unwrap_err();
    assert_eq!(err.code, ErrorCode::DanglingRef);
    put_node(&fx, &fx.testbed_id, "dup");
    let err = ctx.put_entity(node_input(&fx.testbed_id, "dup", "SDR", "")).unwrap_err();
    assert_eq!(err.code, ErrorCode::Duplicate);
    let err = ctx
        .put_entity(NewEntity::Lab {
            name: "fixture LAB".into(),
            owner_user_id: fx.owner.user_id.clone(),
        })
        .unwrap_err();
    assert_eq!(err.code, ErrorCode::Duplicate);
}

#[test]
fn query_filters_combine() {
    let fx = Fixture::new(0);
    let other = put_testbed(&fx, "Other");
    let ctx = fx.plane.context();
    ctx.put_entity(node_input(&fx.testbed_id, "a", "SDR", "B210")).unwrap();
    ctx.put_entity(node_input(&fx.testbed_id, "b", "SERVER", "R740")).unwrap();
    ctx.put_entity(node_input(&other.testbed_id, "c", "sdr", "X310")).unwrap();
    let q = |f: NodeFilter| -> Vec<String> {
        let mut v: Vec<String> = ctx.query(&f).into_iter().map(|n| n.public_identifier).collect();
        v.sort();
        v
    };
    assert_eq!(q(NodeFilter::default()), ["a", "b", "c"]);
    assert_eq!(
        q(NodeFilter {
            device_kind: Some("SDR".into()),
            ..Default::default()
        }),
        ["a", "c"]
    );
    assert_eq!(
        q(NodeFilter {
            device_kind: Some("SDR".into()),
            testbed_name: Some("Other".into()),
            ..Default::default()
        }),
        ["c"]
    );
    assert_eq!(
        q(NodeFilter {
            device_model: Some("r740".into()),
            lab_id: Some(fx.lab_id.clone()),
            ..Default::default()
        }),
        ["b"]
    );
    assert!(q(NodeFilter {
        state: Some(Federated),
        ..Default::default()
    })
    .is_empty());
}

#[test]
fn context_view_includes_lab_of_node() {
    let fx = Fixture::new(1);
    let view = fx.plane.context().get_context(&fx.nodes[0]).unwrap();
    let ids: HashSet<&Id> = view.neighbors.iter().map(Entity::id).collect();
    assert!(ids.contains(&fx.testbed_id));
    assert!(ids.contains(&fx.lab_id));
    assert_eq!(view.edges.len(), 1);
    assert_eq!(view.edges[0].relation, Relation::NodeInTestbed);
}

#[test]
fn deleting_a_lab_cascades() {
    let fx = Fixture::new(2);
    let ctx = fx.plane.context();
    ctx.delete_entity(&fx.lab_id).unwrap();
    assert!(ctx.labs().is_empty());
    assert!(ctx.testbeds(None).is_empty());
    assert!(ctx.query(&NodeFilter::default()).is_empty());
    assert_eq!(
        ctx.query(&NodeFilter {
            include_deleted: true,
            ..Default::default()
        })
        .len(),
        2
    );
    assert!(fx.plane.store().read(|s| s.edges.is_empty()));
    assert_eq!(ctx.get_context(&fx.nodes[0]).unwrap_err().code, ErrorCode::NotFound);
    assert_eq!(ctx.delete_entity(&fx.lab_id).unwrap_err().code, ErrorCode::NotFound);
}

proptest! {
    /// Any walk through the transition graph keeps the history equal to
    /// the accepted transitions and never changes an assigned namespace.
    #[test]
    fn walks_respect_the_graph(steps in prop::collection::vec(0..4usize, 1..40)) {
        let fx = Fixture::new(0);
        let node = put_node(&fx, &fx.testbed_id, "walker");
        let ctx = fx.plane.context();
        let mut state = Registered;
        let mut history = vec![Registered];
        let mut namespace: Option<String> = None;
        for s in steps {
            let to = ALL[s];
            match ctx.set_node_state(&node.node_id, to) {
                Ok(rec) => {
                    prop_assert!(state.can_transition(to));
                    state = to;
                    history.push(to);
                    if let Some(ns) = &namespace {
                        prop_assert_eq!(rec.namespace.as_ref(), Some(ns));
                    }
                    namespace = rec.namespace.clone();
                    prop_assert_eq!(namespace.is_some(), history.contains(&Federated));
                }
                Err(e) => {
                    prop_assert!(!state.can_transition(to));
                    prop_assert_eq!(e.code, ErrorCode::IllegalTransition);
                }
            }
        }
        let rec = fx.plane.store().read(|s| s.nodes[&node.node_id].clone());
        prop_assert_eq!(rec.state_history, history);
    }
}
