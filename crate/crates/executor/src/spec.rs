use std::fmt;
use std::path::PathBuf;

use gridforge_core::time::Timestamp;
use serde::{Deserialize, Serialize};

/// A built environment, reusable by any number of runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub backend: String,
    pub content_hash: String,
    /// Image directory for the sandbox, image tag for containers.
    pub location: String,
    /// Base environment named by the recipe.
    pub base: String,
    pub env: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub cpu_share_pct: f64,
    /// Zero means unlimited.
    pub memory_mb: u64,
    /// Advisory in the sandbox; enforced by the container backend only.
    pub gpu: bool,
}

/// A shared file exposed read-only at `app_dir/<name>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedMount {
    pub host_path: PathBuf,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mounts {
    pub app_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    pub shared: Vec<SharedMount>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestDirs {
    pub app_dir: String,
    pub checkpoint_dir: String,
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecSpec {
    pub image: ImageRef,
    /// Tokenized entry command, e.g. `["python3", "main.py"]`.
    pub entry_command: Vec<String>,
    /// Rendered run-header flags, appended after `entry_command`.
    pub args: Vec<String>,
    pub mounts: Mounts,
    pub limits: ResourceLimits,
    pub rendezvous_port: Option<u16>,
    pub env: Vec<(String, String)>,
}

impl ExecSpec {
    pub fn command_line(&self) -> Vec<String> {
        self.entry_command.iter().chain(&self.args).cloned().collect()
    }

    pub fn console_path(&self) -> PathBuf {
        self.mounts.output_dir.join(gridforge_core::CONSOLE_FILE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HandleId(pub String);

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecState {
    Starting,
    Running,
    Exited(i32),
    Killed,
}

impl ExecState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ExecState::Exited(_) | ExecState::Killed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecHandle {
    pub id: HandleId,
    pub state: ExecState,
    pub started_at: Timestamp,
    pub finished_at: Option<Timestamp>,
    /// Whether filesystem write confinement was applied.
    pub confined: bool,
}
