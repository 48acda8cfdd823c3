use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    User,
    Agent,
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub role: Role,
    /// User name bound to the token; ignored for agents.
    #[serde(default)]
    pub user: Option<String>,
}

impl std::fmt::Debug for TokenEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenEntry")
            .field("role", &self.role)
            .field("user", &self.user)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorPeriods {
    pub liveness_s: f64,
    pub supervision_s: f64,
    pub scheduler_s: f64,
}

impl Default for MonitorPeriods {
    fn default() -> Self {
        MonitorPeriods {
            liveness_s: 5.0,
            supervision_s: 10.0,
            scheduler_s: 1.0,
        }
    }
}

impl MonitorPeriods {
    /// Divides every period by `factor`.
    pub fn compressed(&self, factor: f64) -> Self {
        MonitorPeriods {
            liveness_s: self.liveness_s / factor,
            supervision_s: self.supervision_s / factor,
            scheduler_s: self.scheduler_s / factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    pub listen: SocketAddr,
    /// Where the snapshot and blobs live; `None` keeps them in memory.
    pub state_dir: Option<PathBuf>,
    /// Static dashboard assets served outside the API prefix.
    pub web_root: Option<PathBuf>,
    pub tokens: Vec<TokenEntry>,
    pub periods: MonitorPeriods,
    pub missed_ping_threshold: u32,
    pub retry_cap: u32,
    pub ping_timeout_s: f64,
    pub dispatch_timeout_s: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            listen: SocketAddr::from(([127, 0, 0, 1], 8470)),
            state_dir: None,
            web_root: None,
            tokens: Vec::new(),
            periods: MonitorPeriods::default(),
            missed_ping_threshold: 3,
            retry_cap: 5,
            ping_timeout_s: 2.0,
            dispatch_timeout_s: 10.0,
        }
    }
}

impl ManagerConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: ManagerConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = &self.periods;
        if [p.liveness_s, p.supervision_s, p.scheduler_s].iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err("monitor periods must be positive".into());
        }
        if self.missed_ping_threshold == 0 || self.retry_cap == 0 {
            return Err("missed_ping_threshold and retry_cap must be at least 1".into());
        }
        for t in &self.tokens {
            if t.token.is_empty() {
                return Err("empty token".into());
            }
            if t.role == Role::User && t.user.as_deref().unwrap_or("").is_empty() {
                return Err("user tokens need a user name".into());
            }
        }
        Ok(())
    }

    pub fn ping_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.ping_timeout_s)
    }

    pub fn dispatch_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.dispatch_timeout_s)
    }

    /// First agent token, used for manager-to-agent calls.
    pub fn agent_token(&self) -> Option<&str> {
        self.tokens
            .iter()
            .find(|t| t.role == Role::Agent)
            .map(|t| t.token.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_toml_with_defaults() {
        let cfg = ManagerConfig::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            retry_cap = 2

            [periods]
            scheduler_s = 0.5

            [[tokens]]
            token = "adm"
            role = "admin"

            [[tokens]]
            token = "u1"
            role = "user"
            user = "alice"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.retry_cap, 2);
        assert_eq!(cfg.missed_ping_threshold, 3);
        assert_eq!(cfg.periods.liveness_s, 5.0);
        assert_eq!(cfg.periods.scheduler_s, 0.5);
        assert_eq!(cfg.tokens.len(), 2);
        assert!(!format!("{:?}", cfg.tokens[0]).contains("adm\""));
    }

    #[test]
    fn rejects_nameless_user_token() {
        let err = ManagerConfig::from_toml("[[tokens]]\ntoken = \"x\"\nrole = \"user\"\n").unwrap_err();
        assert!(err.contains("user name"));
    }

    #[test]
    fn compression_divides_periods() {
        let p = MonitorPeriods::default().compressed(50.0);
        assert_eq!(p.liveness_s, 0.1);
        assert_eq!(p.scheduler_s, 0.02);
    }
}
