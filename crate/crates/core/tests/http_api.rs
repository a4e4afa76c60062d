//! The owner and experimenter flows over real HTTP, with an in-process
//! agent talking to the server through `HttpTransport`.

use std::sync::Arc;
use std::time::Duration;

use fedplane::agent::runtime::RuntimeKind;
use fedplane::agent::transport::HttpTransport;
use fedplane::agent::{enroll_flow, Agent, AgentConfig, Pace};
use fedplane::context::Role;
use fedplane::federation::script::parse_embedded;
use fedplane::gateway::http::serve_on;
use fedplane::gateway::Gateway;
use fedplane::harness::fixture::test_config;
use fedplane::ControlPlane;
use serde_json::{json, Value};

struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    async fn send(&self, method: reqwest::Method, path: &str, token: Option<&str>, body: Option<Value>) -> (u16, Value) {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.unwrap();
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn login(&self, user: &str) -> String {
        let (status, body) = self
            .send(reqwest::Method::POST, "/v1/auth/login", None, Some(json!({"username": user, "credential": format!("{user}-credential")})))
            .await;
        assert_eq!(status, 200, "{body}");
        body["token"].as_str().unwrap().to_string()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn federate_reserve_connect_and_stage_over_http() {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>portal</html>").unwrap();
    let cfg = fedplane::PlaneConfig {
        public_url: format!("http://{addr}"),
        ui_dir: Some(ui.path().to_path_buf()),
        ..test_config()
    };
    let plane = Arc::new(ControlPlane::builder(cfg).build().unwrap());
    for (name, role) in [("owner", Role::Owner), ("experimenter", Role::Experimenter)] {
        plane.auth().create_user(name, &format!("{name}-credential"), role).unwrap();
    }
    let server = serve_on(Gateway::new(plane.clone()), listener).await.unwrap();
    let c = Client {
        http: reqwest::Client::new(),
        base: server.base_url(),
    };
    use reqwest::Method as M;
    let owner = c.login("owner").await;
    let user = c.login("experimenter").await;

    // Owner integrates a testbed with one control interface.
    let (status, integ) = c
        .send(
            M::POST,
            "/v1/testbeds/integrate",
            Some(&owner),
            Some(json!({
                "lab_name": "HTTP Lab",
                "public_name": "Rooftop",
                "description": "two SDRs on a roof",
                "nodes": [{"public_identifier": "roof-1", "devices": [{"kind": "SDR", "model": "B210"}]}]
            })),
        )
        .await;
    assert_eq!(status, 201, "{integ}");
    let testbed_id = integ["testbed_id"].as_str().unwrap().to_string();
    let (node_id, script) = integ["scripts"].as_object().unwrap().iter().next().unwrap();
    let embedded = parse_embedded(script["script"].as_str().unwrap()).unwrap();
    assert_eq!(embedded.server_url, c.base);

    // Agent enrolls over HTTP; the pair is single-use.
    let transport = Arc::new(HttpTransport::new(&embedded.server_url));
    let state = tempfile::tempdir().unwrap();
    let mut agent_cfg = AgentConfig {
        server_url: embedded.server_url.clone(),
        activation_id: Some(embedded.activation_id.clone()),
        activation_code: Some(embedded.activation_code.clone()),
        runtime: RuntimeKind::Mock,
        bind_host: "127.0.0.1".into(),
        port_range_start: 43000,
        port_range_end: 43999,
        ..AgentConfig::default()
    };
    let replay = agent_cfg.clone();
    let grant = enroll_flow(&mut agent_cfg, None, transport.as_ref(), &Pace::Real).await.unwrap();
    assert_eq!(grant.node_id.as_str(), node_id);
    let mut again = replay;
    assert!(enroll_flow(&mut again, None, transport.as_ref(), &Pace::Real).await.is_err());
    let runtime = agent_cfg.build_runtime(Pace::Real, Duration::from_millis(50));
    let journal = state.path().join("agent.journal");
    let mut agent = Agent::start(agent_cfg, grant, transport, runtime, Some(&journal), Pace::Real).await.unwrap();
    agent.poll_once(true).await.unwrap();

    let (_, nodes) = c.send(M::GET, "/v1/nodes?state=FEDERATED&device_model=B210", Some(&user), None).await;
    assert_eq!(nodes.as_array().unwrap().len(), 1);

    // Owner binds an image; experimenter reserves and connects.
    let (status, _) = c
        .send(M::POST, "/v1/bindings", Some(&owner), Some(json!({"target_id": testbed_id, "image_ref": "img/desktop:1"})))
        .await;
    assert_eq!(status, 201);
    let (status, session) = c.send(M::POST, "/v1/sessions", Some(&user), Some(json!({"node_id": node_id}))).await;
    assert_eq!(status, 201, "{session}");
    let session_id = session["session_id"].as_str().unwrap().to_string();
    agent.poll_once(true).await.unwrap();
    let (_, session) = c.send(M::GET, &format!("/v1/sessions/{session_id}"), Some(&user), None).await;
    assert_eq!(session["state"], "READY", "{session}");
    let url = session["access_url"].as_str().unwrap().to_string();
    let page = c.http.get(&url).send().await.unwrap();
    assert_eq!(page.status(), 200);

    // A file uploaded while connected lands on the agent host.
    let boundary = "fpboundary";
    let body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"kind\"\r\n\r\ncode\r\n\
         --{boundary}\r\nContent-Disposition: form-data; name=\"namespace\"\r\n\r\nhttp-lab/rooftop/roof-1\r\n\
         --{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"tx.py\"\r\n\r\nprint(1)\r\n\
         --{boundary}--\r\n"
    );
    let resp = c
        .http
        .post(format!("{}/v1/artifacts", c.base))
        .bearer_auth(&user)
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(body)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    let entry: Value = resp.json().await.unwrap();
    assert!(entry["staged_command_id"].is_string(), "{entry}");
    agent.poll_once(true).await.unwrap();
    let staged = state.path().join("staged").join(entry["artifact_id"].as_str().unwrap()).join("tx.py");
    assert_eq!(std::fs::read_to_string(staged).unwrap(), "print(1)");

    let download = c
        .http
        .get(format!("{}/v1/artifacts/{}/content", c.base, entry["artifact_id"].as_str().unwrap()))
        .bearer_auth(&user)
        .send()
        .await
        .unwrap();
    assert_eq!(download.headers()["x-checksum-sha256"], entry["checksum"].as_str().unwrap());
    assert_eq!(download.bytes().await.unwrap().as_ref(), b"print(1)");

    // Disconnect tears the session down on the next poll.
    let (status, _) = c.send(M::DELETE, &format!("/v1/sessions/{session_id}"), Some(&user), None).await;
    assert_eq!(status, 200);
    agent.poll_once(true).await.unwrap();
    assert!(agent.sessions().running_ids().is_empty());

    let (_, latency) = c.send(M::GET, "/v1/latency", Some(&owner), None).await;
    assert_eq!(latency["count"], 1);
    let ics = c
        .http
        .get(format!("{}/v1/nodes/{node_id}/schedule?format=ics", c.base))
        .bearer_auth(&user)
        .send()
        .await
        .unwrap();
    assert_eq!(ics.headers()["content-type"], "text/calendar");
    let ui_page = c.http.get(format!("{}/ui/", c.base)).send().await.unwrap();
    assert_eq!(ui_page.text().await.unwrap(), "<html>portal</html>");
    let (status, err) = c.send(M::GET, "/v1/fleet", Some(&user), None).await;
    assert_eq!((status, err["code"].as_str()), (403, Some("FORBIDDEN")));
    server.shutdown().await;
}
