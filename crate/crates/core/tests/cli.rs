//! Exit codes and I/O of the three binaries.

use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn harness(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harness")).args(args).output().unwrap()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn add_user(db: &Path, name: &str, credential: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_fedplane-server"))
        .arg("--db-path")
        .arg(db)
        .args(["add-user", "--username", name, "--role", "OWNER"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    writeln!(child.stdin.take().unwrap(), "{credential}").unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn harness_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("ok.toml");
    std::fs::write(&spec, "nodes_per_testbed = 2\nsession_count = 3\ndeploy_ms = 2000\n").unwrap();
    let out_file = dir.path().join("report.csv");
    let out = harness(&["run", "--spec", spec.to_str().unwrap(), "--format", "csv", "--out", out_file.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&out_file).unwrap();
    assert_eq!(csv.lines().count(), 4);
    // Deploy time plus at most one poll interval on each side.
    for line in csv.lines().skip(1) {
        let secs: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((2.0..=4.0).contains(&secs), "{line}");
    }

    let table = harness(&["run", "--spec", spec.to_str().unwrap()]);
    assert!(String::from_utf8(table.stdout).unwrap().contains("published manual (not reproduced)"));

    // Deploys outlast the deploy timeout, so sessions never become ready.
    // Almost every message lost: the session never leaves DEPLOYING.
    let lossy = dir.path().join("lossy.toml");
    std::fs::write(&lossy, "seed = 3\ndrop_rate = 0.999\nphase_timeout_s = 5\n").unwrap();
    let out = harness(&["run", "--spec", lossy.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("check sessions_ready failed"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("check sessions_ready failed"));

    assert_eq!(harness(&["run", "--spec", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(harness(&["run", "--spec", spec.to_str().unwrap(), "--format", "xml"]).status.code(), Some(2));
    std::fs::write(&spec, "labs = 0\n").unwrap();
    assert_eq!(harness(&["run", "--spec", spec.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn server_adds_users_and_serves() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("plane.db");
    let out = add_user(&db, "olive", "olive-credential");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = add_user(&db, "olive", "other");
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("DUPLICATE"));

    let port = free_port();
    let mut server = Command::new(env!("CARGO_BIN_EXE_fedplane-server"))
        .arg("--db-path")
        .arg(&db)
        .args(["--listen", &format!("127.0.0.1:{port}")])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let base = format!("http://127.0.0.1:{port}");
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let result = rt.block_on(async {
        let http = reqwest::Client::new();
        let deadline = Instant::now() + Duration::from_secs(15);
        loop {
            if let Ok(r) = http.get(format!("{base}/v1/health")).send().await {
                assert_eq!(r.status(), 200);
                break;
            }
            assert!(Instant::now() < deadline, "server did not come up");
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        http.post(format!("{base}/v1/auth/login"))
            .json(&serde_json::json!({"username": "olive", "credential": "olive-credential"}))
            .send()
            .await
            .unwrap()
            .status()
    });
    let _ = server.kill();
    let _ = server.wait();
    assert_eq!(result, 200);
}

#[test]
fn agent_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("agent.toml");
    let agent = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_agent"))
            .args(args)
            .env("FEDPLANE_AGENT_ENROLL_ATTEMPTS", "1")
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .output()
            .unwrap()
    };
    let cfg = config.to_str().unwrap();

    // No grant and no activation pair.
    assert_eq!(agent(&["run", "--config", cfg]).status.code(), Some(3));

    // Nothing listens on the port.
    let url = format!("http://127.0.0.1:{}", free_port());
    let out = agent(&["enroll", "--server-url", &url, "--activation-id", "a", "--activation-code", "b", "--config", cfg]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let out = agent(&["enroll", "--server-url", "ftp://x", "--activation-id", "a", "--activation-code", "b", "--config", cfg]);
    assert_eq!(out.status.code(), Some(3));
}
