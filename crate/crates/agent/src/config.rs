use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use gridforge_core::ClientConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Sandbox,
    /// A Docker-compatible CLI such as `docker` or `podman`.
    Container { cli: String },
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub manager_url: String,
    pub token: String,
    /// Stable identity across restarts; re-registration with the same id
    /// keeps the manager-side client id.
    pub agent_id: String,
    pub listen: SocketAddr,
    /// `host:port` the manager should call; defaults to `listen`.
    pub advertise: Option<String>,
    pub workdir: PathBuf,
    pub backend: Backend,
    pub has_gpu: bool,
    /// Detected from the host when zero.
    pub cores: u32,
    pub ram_mb: u64,
    pub client: ClientConfig,
    /// Local relaunches of an abnormally exited run before it is Failed.
    pub max_restarts: u32,
    pub kill_grace_s: f64,
    pub barrier_poll_s: f64,
    pub exec_poll_s: f64,
    pub request_timeout_s: f64,
    /// Extra environment handed to every run.
    pub run_env: Vec<(String, String)>,
}

impl std::fmt::Debug for AgentConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentConfig")
            .field("manager_url", &self.manager_url)
            .field("agent_id", &self.agent_id)
            .field("listen", &self.listen)
            .field("advertise", &self.advertise)
            .field("workdir", &self.workdir)
            .field("backend", &self.backend)
            .field("client", &self.client)
            .finish_non_exhaustive()
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            manager_url: "http://127.0.0.1:8470".into(),
            token: String::new(),
            agent_id: String::new(),
            listen: SocketAddr::from(([0, 0, 0, 0], 8471)),
            advertise: None,
            workdir: PathBuf::from("gridforge-agent"),
            backend: Backend::Sandbox,
            has_gpu: false,
            cores: 0,
            ram_mb: 0,
            client: ClientConfig::default(),
            max_restarts: 3,
            kill_grace_s: 5.0,
            barrier_poll_s: 1.0,
            exec_poll_s: 0.1,
            request_timeout_s: 30.0,
            run_env: Vec::new(),
        }
    }
}

impl AgentConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: AgentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.client.validate()?;
        if self.manager_url.is_empty() {
            return Err("manager_url is required".into());
        }
        if self.agent_id.is_empty() {
            return Err("agent_id is required".into());
        }
        for v in [self.kill_grace_s, self.barrier_poll_s, self.exec_poll_s, self.request_timeout_s] {
            if !(v.is_finite() && v > 0.0) {
                return Err("periods and timeouts must be positive".into());
            }
        }
        Ok(())
    }

    pub fn secs(v: f64) -> Duration {
        Duration::from_secs_f64(v.max(0.001))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_toml() {
        let cfg = AgentConfig::from_toml(
            r#"
            manager_url = "http://10.0.0.1:8470"
            token = "agent-secret"
            agent_id = "lab-pc-3"
            listen = "0.0.0.0:9001"
            workdir = "/var/lib/gridforge"
            backend = { kind = "container", cli = "podman" }
            [client]
            max_concurrent_runs = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.client.max_concurrent_runs, 4);
        assert_eq!(cfg.client.cpu_refusal_threshold_pct, 70.0);
        assert_eq!(cfg.client.interactive_allocation_pct, 10.0);
        assert_eq!(cfg.backend, Backend::Container { cli: "podman".into() });
        assert!(!format!("{cfg:?}").contains("agent-secret"));
    }

    #[test]
    fn rejects_inverted_thresholds() {
        let err = AgentConfig::from_toml(
            "agent_id = \"x\"\n[client]\ninteractive_allocation_pct = 80.0\ncpu_refusal_threshold_pct = 70.0\n",
        );
        assert!(err.is_err());
    }
}
