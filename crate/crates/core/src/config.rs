//! Server configuration: TOML file, then `FEDPLANE_*` environment overrides,
//! then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneConfig {
    pub listen: String,
    pub db_path: Option<PathBuf>,
    /// Directory of the artifact blob store. Defaults to `<db_path>.blobs`.
    pub blob_root: Option<PathBuf>,
    /// fsync the journal after each commit.
    pub sync_writes: bool,
    /// URL agents use to reach this server; embedded into deployment scripts.
    pub public_url: String,
    /// Where deployment scripts download the agent binary from.
    pub agent_download_url: Option<String>,
    /// Agent executable served at `/dist/fedplane-agent`.
    pub agent_binary: Option<PathBuf>,
    /// Static portal assets served under `/ui`.
    pub ui_dir: Option<PathBuf>,
    pub activation_ttl_s: i64,
    pub heartbeat_interval_s: i64,
    pub degraded_after_missed: i64,
    pub offline_after_missed: i64,
    pub stale_after_days: i64,
    pub command_output_cap: usize,
    /// Extra time past a command's own timeout before an undelivered result
    /// is declared TIMED_OUT.
    pub command_grace_s: i64,
    pub reject_offline_dispatch: bool,
    pub max_reservation_s: i64,
    pub instant_access: bool,
    pub instant_window_s: i64,
    pub session_teardown_grace_s: i64,
    pub deploy_timeout_s: i64,
    pub max_sessions_per_node: usize,
    pub max_artifact_bytes: u64,
    pub token_ttl_s: i64,
    pub password_hash: HashParams,
    pub sweep_interval_ms: u64,
}

/// Argon2id cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashParams {
    pub memory_kib: u32,
    pub iterations: u32,
    pub parallelism: u32,
}

impl Default for HashParams {
    fn default() -> Self {
        HashParams {
            memory_kib: 19 * 1024,
            iterations: 2,
            parallelism: 1,
        }
    }
}

impl HashParams {
    /// Cheap parameters for tests and simulation runs.
    pub fn fast() -> Self {
        HashParams {
            memory_kib: 256,
            iterations: 1,
            parallelism: 1,
        }
    }
}

impl Default for PlaneConfig {
    fn default() -> Self {
        PlaneConfig {
            listen: "127.0.0.1:8080".into(),
            db_path: None,
            blob_root: None,
            sync_writes: true,
            public_url: "http://127.0.0.1:8080".into(),
            agent_download_url: None,
            agent_binary: None,
            ui_dir: None,
            activation_ttl_s: 24 * 3600,
            heartbeat_interval_s: 5,
            degraded_after_missed: 3,
            offline_after_missed: 12,
            stale_after_days: 31,
            command_output_cap: 64 * 1024,
            command_grace_s: 30,
            reject_offline_dispatch: false,
            max_reservation_s: 8 * 3600,
            instant_access: true,
            instant_window_s: 30 * 60,
            session_teardown_grace_s: 60,
            deploy_timeout_s: 120,
            max_sessions_per_node: 1,
            max_artifact_bytes: 512 * 1024 * 1024,
            token_ttl_s: 12 * 3600,
            password_hash: HashParams::default(),
            sweep_interval_ms: 1000,
        }
    }
}

impl PlaneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::new(ErrorCode::Validation, format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::new(ErrorCode::Validation, format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies `FEDPLANE_<KEY>` overrides for top-level scalar keys.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| Error::new(ErrorCode::Internal, e.to_string()))?;
        let mut touched = false;
        for (key, value) in vars {
            let Some(name) = key.strip_prefix("FEDPLANE_") else { continue };
            if name.starts_with("AGENT_") {
                continue;
            }
            let name = name.to_ascii_lowercase();
            let parsed = match table.get(&name) {
                Some(toml::Value::Integer(_)) => value.parse::<i64>().map(toml::Value::Integer).ok(),
                Some(toml::Value::Boolean(_)) => value.parse::<bool>().map(toml::Value::Boolean).ok(),
                Some(toml::Value::Table(_)) => None,
                _ if is_known_key(&name) => Some(toml::Value::String(value.clone())),
                _ => continue,
            };
            let Some(parsed) = parsed else {
                return Err(Error::new(ErrorCode::Validation, format!("bad value for {key}")));
            };
            table.insert(name, parsed);
            touched = true;
        }
        if touched {
            *self = table
                .try_into()
                .map_err(|e: toml::de::Error| Error::new(ErrorCode::Validation, e.to_string()))?;
        }
        Ok(())
    }

    pub fn blob_root(&self) -> Option<PathBuf> {
        self.blob_root.clone().or_else(|| {
            self.db_path.as_ref().map(|p| {
                let mut os = p.clone().into_os_string();
                os.push(".blobs");
                PathBuf::from(os)
            })
        })
    }
}

fn is_known_key(name: &str) -> bool {
    matches!(
        name,
        "listen" | "db_path" | "blob_root" | "public_url" | "agent_download_url" | "agent_binary" | "ui_dir"
    )
}
