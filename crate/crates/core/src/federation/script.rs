//! Deployment script rendering.

use sha2::{Digest, Sha256};

/// Inputs to the script template. Everything here ends up verbatim in the
/// script text, so the checksum only changes when one of these (or the
/// template itself) changes.
pub struct ScriptParams<'a> {
    pub server_url: &'a str,
    pub download_url: &'a str,
    pub node_id: &'a str,
    pub public_identifier: &'a str,
    pub activation_id: &'a str,
    pub activation_code: &'a str,
}

/// Single-quotes a value for POSIX sh.
pub fn sh_quote(value: &str) -> String {
    format!("'{}'", value.replace('\'', r"'\''"))
}

pub fn render(p: &ScriptParams<'_>) -> String {
    let comment_label: String = p
        .public_identifier
        .chars()
        .map(|c| if c.is_control() { ' ' } else { c })
        .collect();
    format!(
        r#"#!/bin/sh
# fedplane agent deployment for node {label} ({node_id})
# Run once on the node's control interface. The embedded activation is
# single-use: it is consumed by the first successful enrollment.
set -eu
(set -o pipefail) 2>/dev/null && set -o pipefail

FEDPLANE_SERVER_URL={server_url}
FEDPLANE_NODE_ID={node_id_q}
FEDPLANE_ACTIVATION_ID={activation_id}
FEDPLANE_ACTIVATION_CODE={activation_code}
FEDPLANE_AGENT_URL={download_url}
FEDPLANE_PREFIX="${{FEDPLANE_PREFIX:-/usr/local}}"
FEDPLANE_CONFIG_DIR="${{FEDPLANE_CONFIG_DIR:-/etc/fedplane}}"
FEDPLANE_LOG="${{FEDPLANE_LOG:-/var/log/fedplane-agent.log}}"

SUDO=""
if [ "$(id -u)" -ne 0 ]; then SUDO="sudo"; fi

# 1. refresh the package index and install prerequisites
if command -v apt-get >/dev/null 2>&1; then
  $SUDO apt-get update -y
  $SUDO apt-get install -y curl ca-certificates
elif command -v dnf >/dev/null 2>&1; then
  $SUDO dnf makecache -y
  $SUDO dnf install -y curl ca-certificates
elif command -v apk >/dev/null 2>&1; then
  $SUDO apk update
  $SUDO apk add curl ca-certificates
fi

# 2. install the agent
$SUDO mkdir -p "$FEDPLANE_PREFIX/bin" "$FEDPLANE_CONFIG_DIR"
FEDPLANE_TMP="$(mktemp)"
curl -fsSL "$FEDPLANE_AGENT_URL" -o "$FEDPLANE_TMP"
$SUDO install -m 0755 "$FEDPLANE_TMP" "$FEDPLANE_PREFIX/bin/fedplane-agent"
rm -f "$FEDPLANE_TMP"

# 3. enroll with the embedded activation
$SUDO "$FEDPLANE_PREFIX/bin/fedplane-agent" enroll \
  --server-url "$FEDPLANE_SERVER_URL" \
  --activation-id "$FEDPLANE_ACTIVATION_ID" \
  --activation-code "$FEDPLANE_ACTIVATION_CODE" \
  --config "$FEDPLANE_CONFIG_DIR/agent.toml"

# 4. start the agent
$SUDO nohup "$FEDPLANE_PREFIX/bin/fedplane-agent" run --config "$FEDPLANE_CONFIG_DIR/agent.toml" >"$FEDPLANE_LOG" 2>&1 &
echo $! >"$FEDPLANE_CONFIG_DIR/agent.pid"
echo "fedplane: node $FEDPLANE_NODE_ID enrolled, agent started"
"#,
        label = comment_label,
        node_id = p.node_id,
        node_id_q = sh_quote(p.node_id),
        server_url = sh_quote(p.server_url),
        activation_id = sh_quote(p.activation_id),
        activation_code = sh_quote(p.activation_code),
        download_url = sh_quote(p.download_url),
    )
}

pub fn checksum(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// The activation pair and server URL embedded in a rendered script.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddedActivation {
    pub server_url: String,
    pub activation_id: String,
    pub activation_code: String,
}

/// Recovers the embedded values from a script produced by [`render`].
pub fn parse_embedded(script: &str) -> Option<EmbeddedActivation> {
    let value = |name: &str| {
        script.lines().find_map(|line| {
            let rest = line.strip_prefix(name)?.strip_prefix('=')?;
            let inner = rest.strip_prefix('\'')?.strip_suffix('\'')?;
            Some(inner.replace(r"'\''", "'"))
        })
    };
    Some(EmbeddedActivation {
        server_url: value("FEDPLANE_SERVER_URL")?,
        activation_id: value("FEDPLANE_ACTIVATION_ID")?,
        activation_code: value("FEDPLANE_ACTIVATION_CODE")?,
    })
}
