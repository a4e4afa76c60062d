//! Run-command execution: one child process group per command, killed as a
//! whole on timeout so no descendant outlives the command.

use std::process::Stdio;
use std::time::Duration;

use tokio::io::{AsyncRead, AsyncReadExt};
use tokio::process::Command;

use crate::api::ResultOutcome;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub outcome: ResultOutcome,
    pub exit_status: Option<i32>,
    /// stdout followed by stderr, cut at the cap.
    pub output: String,
    pub truncated: bool,
}

async fn drain(mut pipe: impl AsyncRead + Unpin, cap: usize) -> (Vec<u8>, bool) {
    let mut kept = Vec::new();
    let mut chunk = [0u8; 8192];
    let mut truncated = false;
    loop {
        match pipe.read(&mut chunk).await {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                if n > room {
                    truncated = true;
                }
                kept.extend_from_slice(&chunk[..n.min(room)]);
            }
        }
    }
    (kept, truncated)
}

fn kill_group(pid: u32) {
    // SAFETY: killpg has no memory-safety preconditions; a stale group id
    // yields ESRCH, which is ignored.
    unsafe {
        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
    }
}

pub async fn run(argv: &[String], timeout: Duration, cap: usize) -> ExecResult {
    let Some((program, args)) = argv.split_first() else {
        return ExecResult {
            outcome: ResultOutcome::SpawnFailed,
            exit_status: None,
            output: "empty argv".into(),
            truncated: false,
        };
    };
    let mut cmd = Command::new(program);
    cmd.args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .kill_on_drop(true);
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(err) => {
            return ExecResult {
                outcome: ResultOutcome::SpawnFailed,
                exit_status: None,
                output: format!("failed to start {program}: {err}"),
                truncated: false,
            }
        }
    };
    let pid = child.id().expect("running child has a pid");
    let stdout = tokio::spawn(drain(child.stdout.take().expect("piped"), cap));
    let stderr = tokio::spawn(drain(child.stderr.take().expect("piped"), cap));
    let (outcome, exit_status) = match tokio::time::timeout(timeout, child.wait()).await {
        Ok(Ok(status)) => {
            // Descendants that kept running in the group go too.
            kill_group(pid);
            (ResultOutcome::Exited, Some(status.code().unwrap_or(-1)))
        }
        Ok(Err(err)) => {
            kill_group(pid);
            let _ = child.wait().await;
            return ExecResult {
                outcome: ResultOutcome::SpawnFailed,
                exit_status: None,
                output: format!("waiting for {program}: {err}"),
                truncated: false,
            };
        }
        Err(_) => {
            kill_group(pid);
            let _ = child.wait().await;
            (ResultOutcome::TimedOut, None)
        }
    };
    let (mut out, t1) = stdout.await.unwrap_or_default();
    let (err, t2) = stderr.await.unwrap_or_default();
    let room = cap.saturating_sub(out.len());
    let t3 = err.len() > room;
    out.extend_from_slice(&err[..err.len().min(room)]);
    ExecResult {
        outcome,
        exit_status,
        output: String::from_utf8_lossy(&out).into_owned(),
        truncated: t1 || t2 || t3,
    }
}
