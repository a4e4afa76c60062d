use serde_json::{json, Value};

use super::*;
use crate::harness::fixture::Fixture;

struct Api {
    fx: Fixture,
    gw: Gateway,
    admin: String,
    owner: String,
    user: String,
}

fn api(nodes: usize) -> Api {
    let fx = Fixture::new(nodes);
    let gw = Gateway::new(fx.plane.clone());
    let login = |name: &str| {
        let resp = gw.handle(&ApiRequest::new(Method::Post, "/v1/auth/login").json(&LoginBody {
            username: name.into(),
            credential: format!("{name}-credential"),
        }));
        resp.decode::<crate::auth::LoginGrant>().unwrap().token
    };
    let (admin, owner, user) = (login("admin"), login("owner"), login("experimenter"));
    Api { fx, gw, admin, owner, user }
}

impl Api {
    fn call(&self, method: Method, path: &str, token: &str, body: Option<Value>) -> ApiResponse {
        let mut req = ApiRequest::new(method, path).bearer(token);
        if let Some(b) = body {
            req = req.json(&b);
        }
        self.gw.handle(&req)
    }
}

fn concrete(pattern: &str, id: &Id) -> String {
    pattern.replace("{id}", id.as_str()).replace("{*path}", "index.html")
}

#[test]
fn route_patterns_match_segments() {
    assert_eq!(match_route("/v1/nodes/{id}", "/v1/nodes/abc"), Some(vec![("id", "abc".to_string())]));
    assert_eq!(match_route("/v1/nodes/{id}", "/v1/nodes/abc/"), Some(vec![("id", "abc".to_string())]));
    assert_eq!(match_route("/v1/nodes/{id}", "/v1/nodes/"), None);
    assert_eq!(match_route("/v1/nodes/{id}", "/v1/nodes/a/b"), None);
    assert_eq!(match_route("/ui/{*path}", "/ui/a/b.css"), Some(vec![("path", "a/b.css".to_string())]));
    assert_eq!(match_route("/v1/health", "/v1/healthz"), None);
}

#[test]
fn every_route_enforces_its_access_rule() {
    let a = api(1);
    let id = a.fx.nodes[0].clone();
    let agent = a.fx.tokens[0].clone();
    let send = |r: &Route, token: Option<&str>| {
        let mut req = ApiRequest::new(r.method, &concrete(r.pattern, &id));
        if let Some(t) = token {
            req = req.bearer(t);
        }
        a.gw.handle(&req)
    };
    let status = |r: &Route, token: Option<&str>| send(r, token).status;
    for r in ROUTES.iter().filter(|r| r.action != "auth.logout") {
        let anon = status(r, None);
        let as_user = status(r, Some(&a.user));
        let as_agent = status(r, Some(&agent));
        match r.access {
            Access::Public => {
                assert_ne!(send(r, None).error_envelope().code, "UNAUTHORIZED", "{}", r.pattern)
            }
            Access::Agent => {
                assert_eq!(anon, 401, "{}", r.pattern);
                assert_eq!(as_user, 401, "user token on {}", r.pattern);
                assert_ne!(as_agent, 401, "{}", r.pattern);
            }
            Access::Authenticated => {
                assert_eq!(anon, 401, "{}", r.pattern);
                assert_eq!(as_agent, 401, "agent token on {}", r.pattern);
                assert!(![401, 403].contains(&as_user), "{} gave {as_user}", r.pattern);
            }
            Access::Roles(roles) => {
                assert_eq!(anon, 401, "{}", r.pattern);
                assert_eq!(as_agent, 401, "{}", r.pattern);
                assert!(!roles.contains(&Role::Experimenter));
                assert_eq!(as_user, 403, "{}", r.pattern);
                assert_ne!(status(r, Some(&a.admin)), 403, "{}", r.pattern);
            }
        }
    }
}

#[test]
fn logout_revokes_the_token() {
    let a = api(0);
    assert_eq!(a.call(Method::Post, "/v1/auth/logout", &a.user, None).status, 204);
    assert_eq!(a.call(Method::Get, "/v1/auth/me", &a.user, None).status, 401);
    assert_eq!(a.call(Method::Get, "/v1/auth/me", &a.owner, None).status, 200);
}

#[test]
fn unknown_paths_and_methods() {
    let a = api(0);
    let r = a.call(Method::Get, "/v1/nothing-here", &a.user, None);
    assert_eq!((r.status, r.error_envelope().code.as_str()), (404, "NOT_FOUND"));
    let r = a.call(Method::Put, "/v1/health", &a.user, None);
    assert_eq!((r.status, r.error_envelope().code.as_str()), (422, "BAD_REQUEST"));
    let mut req = ApiRequest::new(Method::Get, "/v1/health");
    req.method = None;
    assert_eq!(a.gw.handle(&req).error_envelope().code, "BAD_REQUEST");
    let r = a.call(Method::Get, "/v1/entities/not-an-id", &a.user, None);
    assert_eq!(r.status, 404);
    let r = a.call(Method::Get, "/v1/auth/me", "garbage", None);
    assert_eq!(r.status, 401);
    let r = a.gw.handle(&ApiRequest::new(Method::Get, "/v1/auth/me").header("Authorization", "Basic abc"));
    assert_eq!(r.error_envelope().code, "UNAUTHORIZED");
}

#[test]
fn errors_use_one_envelope() {
    let a = api(1);
    let r = a.call(Method::Post, "/v1/labs", &a.owner, Some(json!({"name": ""})));
    assert!(!r.is_success());
    let v: Value = serde_json::from_slice(&r.body).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["code", "details", "message"]);
    let r = a.call(Method::Post, "/v1/labs", &a.owner, None);
    assert_eq!(r.error_envelope().code, "BAD_REQUEST");
    let r = a.call(Method::Get, "/v1/nodes?state=SLEEPING", &a.user, None);
    assert_eq!(r.error_envelope().details, ["state"]);
    let r = a.call(Method::Get, &format!("/v1/nodes/{}/schedule?from=2025-01-01T00:00:00Z", a.fx.nodes[0]), &a.user, None);
    assert_eq!(r.error_envelope().details, ["from", "to"]);
}

#[test]
fn secrets_never_leave_the_store() {
    let a = api(1);
    let r = a.call(
        Method::Post,
        "/v1/users",
        &a.admin,
        Some(json!({"username": "new", "credential": "hunter2-hunter2", "role": "EXPERIMENTER"})),
    );
    assert_eq!(r.status, 201);
    let body = String::from_utf8(r.body).unwrap();
    assert!(!body.contains("hunter2") && !body.contains("credential_hash") && !body.contains("argon2"));
    let me = a.call(Method::Get, "/v1/auth/me", &a.user, None);
    assert!(!String::from_utf8(me.body).unwrap().contains("credential"));

    let resp = a.call(Method::Post, &format!("/v1/nodes/{}/activation", a.fx.nodes[0]), &a.owner, None);
    assert_eq!(resp.status, 409, "an enrolled node cannot be re-activated");

    for rec in a.fx.plane.audit().records() {
        let line = serde_json::to_string(&rec).unwrap();
        for secret in [&a.admin, &a.owner, &a.user, &a.fx.tokens[0]] {
            assert!(!line.contains(secret.as_str()), "audit leaked a token: {line}");
        }
        assert!(!line.contains("hunter2"));
    }
}

#[test]
fn malformed_enrollment_is_rejected_without_detail() {
    let a = api(0);
    let mut req = ApiRequest::new(Method::Post, "/v1/agent/enroll");
    req.body = b"{not json".to_vec();
    let r = a.gw.handle(&req);
    assert_eq!(r.status, 401);
    let env = r.error_envelope();
    assert_eq!((env.code.as_str(), env.message.as_str()), ("REJECTED", "activation rejected"));
    let unknown = a.gw.handle(&ApiRequest::new(Method::Post, "/v1/agent/enroll").json(&json!({
        "activation_id": Id::parse(a.fx.lab_id.as_str()).unwrap(),
        "activation_code": "nope",
        "agent_version": "1",
    })));
    assert_eq!(unknown.error_envelope(), env, "client cannot tell the reasons apart");
    let recs = a.fx.plane.audit().records();
    let last_two: Vec<Option<&str>> = recs[recs.len() - 2..].iter().map(|r| r.detail.as_deref()).collect();
    assert_eq!(last_two[0], Some("MALFORMED"));
    assert!(last_two[1].is_some());
}

#[test]
fn audit_records_every_call() {
    let a = api(0);
    let before = a.fx.plane.audit().len();
    a.call(Method::Get, "/v1/labs", &a.user, None);
    a.call(Method::Post, "/v1/labs", &a.user, Some(json!({"name": "x"})));
    a.gw.handle(&ApiRequest::new(Method::Get, "/v1/zzz"));
    let recs = a.fx.plane.audit().records();
    assert_eq!(recs.len(), before + 3);
    let tail: Vec<(&str, &str, u16)> = recs[before..]
        .iter()
        .map(|r| (r.action.as_str(), r.outcome.as_str(), r.status))
        .collect();
    assert_eq!(tail, [("labs.list", "OK", 200), ("labs.create", "FORBIDDEN", 403), ("unrouted", "NOT_FOUND", 404)]);
    assert_eq!(recs[before].actor, format!("user:{}", a.fx.user.user_id));
    assert_eq!(recs[before + 2].actor, "anonymous");
}

#[test]
fn lab_ownership_is_enforced() {
    let a = api(1);
    let other = a
        .call(Method::Post, "/v1/users", &a.admin, Some(json!({"username": "rival", "credential": "rival-credential", "role": "OWNER"})))
        .decode::<UserView>()
        .unwrap();
    let rival = a
        .gw
        .handle(&ApiRequest::new(Method::Post, "/v1/auth/login").json(&json!({"username": "rival", "credential": "rival-credential"})))
        .decode::<crate::auth::LoginGrant>()
        .unwrap()
        .token;
    let node = a.fx.nodes[0].clone();
    let dispatch = json!({"argv": ["true"]});
    assert_eq!(a.call(Method::Post, &format!("/v1/nodes/{node}/commands"), &rival, Some(dispatch.clone())).status, 403);
    assert_eq!(a.call(Method::Post, &format!("/v1/nodes/{node}/commands"), &a.owner, Some(dispatch)).status, 201);
    assert_eq!(
        a.call(Method::Post, "/v1/labs", &rival, Some(json!({"name": "Stolen", "owner_user_id": a.fx.owner.user_id}))).status,
        403
    );
    let made = a.call(Method::Post, "/v1/labs", &a.admin, Some(json!({"name": "Rival Lab", "owner_user_id": other.user_id})));
    assert_eq!(made.status, 201);
    let fleet: Vec<Value> = a.call(Method::Get, "/v1/fleet", &rival, None).decode().unwrap();
    assert!(fleet.is_empty());
    let fleet: Vec<Value> = a.call(Method::Get, "/v1/fleet", &a.owner, None).decode().unwrap();
    assert_eq!(fleet.len(), 1);
}

#[test]
fn multipart_upload_and_download() {
    let a = api(1);
    let body = concat!(
        "--XyZ\r\n",
        "Content-Disposition: form-data; name=\"kind\"\r\n\r\n",
        "dataset\r\n",
        "--XyZ\r\n",
        "Content-Disposition: form-data; name=\"namespace\"\r\n\r\n",
        "fixture-lab/fixture-testbed/node-1\r\n",
        "--XyZ\r\n",
        "Content-Disposition: form-data; name=\"file\"; filename=\"capture.iq\"\r\n",
        "Content-Type: application/octet-stream\r\n\r\n",
        "\x00\x01binary\r\n",
        "--XyZ--\r\n",
    );
    let mut req = ApiRequest::new(Method::Post, "/v1/artifacts")
        .bearer(&a.user)
        .header("content-type", "multipart/form-data; boundary=XyZ");
    req.body = body.as_bytes().to_vec();
    let entry: crate::repos::ArtifactEntry = a.gw.handle(&req).decode().unwrap();
    assert_eq!(entry.filename, "capture.iq");
    assert_eq!(entry.size_bytes, 8);

    let got = a.call(Method::Get, &format!("/v1/artifacts/{}/content", entry.artifact_id), &a.user, None);
    assert_eq!(got.body, b"\x00\x01binary");
    assert_eq!(got.get_header("x-checksum-sha256"), Some(entry.checksum.as_str()));
    assert_eq!(got.get_header("content-disposition"), Some("attachment; filename=\"capture.iq\""));

    // Raw body with metadata in the query string.
    let mut raw = ApiRequest::new(Method::Post, "/v1/artifacts?kind=code&namespace=fixture-lab/fixture-testbed&filename=run.sh")
        .bearer(&a.user)
        .header("content-type", "application/octet-stream");
    raw.body = b"echo hi".to_vec();
    assert_eq!(a.gw.handle(&raw).status, 201);

    let mut bad = ApiRequest::new(Method::Post, "/v1/artifacts").bearer(&a.user);
    bad.body = b"x".to_vec();
    assert_eq!(a.gw.handle(&bad).error_envelope().details, ["kind", "namespace", "file"]);

    let listed: Vec<Value> = a.call(Method::Get, "/v1/artifacts?kind=code", &a.user, None).decode().unwrap();
    assert_eq!(listed.len(), 1);
}

#[test]
fn static_ui_stays_inside_its_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>portal</html>").unwrap();
    std::fs::write(dir.path().join("app.js"), "1").unwrap();
    let cfg = crate::config::PlaneConfig {
        ui_dir: Some(dir.path().to_path_buf()),
        ..crate::harness::fixture::test_config()
    };
    let fx = Fixture::with_config(cfg, 0).unwrap();
    let gw = Gateway::new(fx.plane.clone());
    let get = |p: &str| gw.handle(&ApiRequest::new(Method::Get, p));
    let root = get("/ui");
    assert_eq!((root.status, root.get_header("content-type")), (200, Some("text/html; charset=utf-8")));
    assert_eq!(get("/ui/app.js").get_header("content-type"), Some("text/javascript"));
    assert_eq!(get("/ui/../Cargo.toml").status, 404);
    assert_eq!(get("/ui/missing.css").status, 404);
}

#[test]
fn health_is_public() {
    let a = api(0);
    let h: Health = a.gw.handle(&ApiRequest::new(Method::Get, "/v1/health")).decode().unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.version, crate::VERSION);
}

#[test]
fn agents_fetch_only_their_own_artifacts() {
    let a = api(2);
    let repos = a.fx.plane.repos();
    let up = |ns: &str| {
        repos
            .upload(
                &a.fx.user.user_id,
                crate::repos::UploadRequest {
                    kind: ArtifactKind::Dataset,
                    namespace: ns.into(),
                    filename: "f".into(),
                    bytes: ns.as_bytes().to_vec(),
                    descriptors: Descriptors::default(),
                    expected_checksum: None,
                },
            )
            .unwrap()
    };
    let mine = up("fixture-lab/fixture-testbed/node-1");
    let theirs = up("fixture-lab/fixture-testbed/node-2");
    let get = |id: &Id, token: &str| a.call(Method::Get, &format!("/v1/agent/artifacts/{id}/content"), token, None);
    let ok = get(&mine.artifact_id, &a.fx.tokens[0]);
    assert_eq!((ok.status, ok.body.as_slice()), (200, b"fixture-lab/fixture-testbed/node-1".as_slice()));
    assert_eq!(get(&theirs.artifact_id, &a.fx.tokens[0]).status, 403);
    assert_eq!(get(&mine.artifact_id, &a.user).status, 401);
}
