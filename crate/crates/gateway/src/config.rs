use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dnd_core::bundle::CheckpointPaths;
use dnd_core::defense::DefenseConfig;
use dnd_core::sentinel::SentinelPolicy;
use dnd_core::{Error, Result};

/// Environment variable overriding [`GatewayConfig::root_seed`].
pub const SEED_ENV: &str = "DND_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    /// `host:port`; port 0 picks a free port.
    pub listen: String,
    pub root_seed: u64,
    #[serde(default)]
    pub defense: DefenseConfig,
    /// Also carries the session idle timeout.
    #[serde(default)]
    pub sentinel: SentinelPolicy,
    pub checkpoints: CheckpointPaths,
    #[serde(default)]
    pub reject_on_suspect: bool,
    pub audit_log: PathBuf,
}

impl GatewayConfig {
    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: GatewayConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.checkpoints = cfg.checkpoints.resolved(base);
        if cfg.audit_log.is_relative() {
            cfg.audit_log = base.join(&cfg.audit_log);
        }
        Ok(cfg)
    }

    /// Applies `DND_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.root_seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("{SEED_ENV}={s:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr> {
        self.listen.parse().map_err(|_| {
            Error::Validation(format!("listen address {:?} is not host:port", self.listen))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.listen_addr()?;
        self.defense.validate()?;
        self.sentinel.validate()?;
        self.checkpoints.check_exist()
    }
}
